#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace vcpseg::ad {

// Reverse-mode automatic differentiation over dense double matrices.
//
// Every operation allocates a Node holding its value; nodes whose inputs all
// have needs_grad == false carry no tape entry, so constant subgraphs cost a
// value copy and nothing else. backward() walks reachable nodes in reverse
// creation order, which is a valid topological order because operations only
// consume already-created nodes.

using Mat = Eigen::MatrixXd;

class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Mat val;
    Mat grad;  // empty until first accumulation
    bool needs_grad = false;
    std::uint64_t seq = 0;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;

    Node(Mat v, bool ng);

    void accumulate(const Mat& g) {
        if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
        grad += g;
    }
    bool has_grad() const { return grad.size() != 0; }
    void zero_grad() { grad.resize(0, 0); }

    int rows() const { return static_cast<int>(val.rows()); }
    int cols() const { return static_cast<int>(val.cols()); }
};

Var leaf(Mat v);       // trainable parameter, needs_grad = true
Var constant(Mat v);   // frozen input
Var scalar(double v);  // 1x1 constant

// arithmetic
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_rowvec(const Var& a, const Var& b);  // a: N x C, b: 1 x C
Var mul_rowvec(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T

// structure
Var rows(const Var& a, int r0, int n);
Var cols(const Var& a, int c0, int n);
Var vconcat(const std::vector<Var>& parts);
Var hconcat(const std::vector<Var>& parts);

// nonlinearities
Var row_softmax(const Var& a);
// softmax where row i only attends to columns [0, i]; columns beyond i are
// structurally excluded (exact zeros), not masked with large negatives.
Var causal_row_softmax(const Var& a);
Var row_l2_normalize(const Var& a, double eps = 1e-12);
Var layer_norm_rows(const Var& a, double eps);
Var quick_gelu(const Var& a);
Var exp(const Var& a);
Var log_maxeps(const Var& a, double eps);  // log(max(a, eps))
Var pow_const(const Var& a, double p);
Var clamp(const Var& a, double lo, double hi);

// scalar (1x1) helpers
Var div_scalar(const Var& a, const Var& s);
Var add_const(const Var& a, double c);

// reductions
Var sum(const Var& a);
Var mean(const Var& a);

// a holds an H x W grid per column, flattened row-major (index y*W + x);
// output is the bilinearly resampled h x w grid per column, half-pixel
// centers, align-corners off.
Var upsample_bilinear(const Var& a, int H, int W, int h, int w);

// width-3 cross-correlation of the single-row signal x with r kernels,
// stride 1, zero padding 1; b is r x 1. Output r x C.
Var conv1d_k3(const Var& x, const Var& k, const Var& b);

// root must be 1x1. Seeds d(root)/d(root) = 1 and sweeps the tape.
void backward(const Var& root);

}  // namespace vcpseg::ad
