#include "vcpseg/autodiff.hpp"

#include "vcpseg/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <unordered_set>

namespace vcpseg::ad {

namespace {

std::atomic<std::uint64_t> g_seq{1};

Var make_node(Mat val, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    bool ng = false;
    for (const auto& p : parents) ng = ng || p->needs_grad;
    auto n = std::make_shared<Node>(std::move(val), ng);
    if (ng) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->rows() != b->rows() || a->cols() != b->cols())
        throw ShapeMismatch(std::string(op) + ": shape mismatch");
}

}  // namespace

Node::Node(Mat v, bool ng) : val(std::move(v)), needs_grad(ng), seq(g_seq.fetch_add(1)) {}

Var leaf(Mat v) {
    auto n = std::make_shared<Node>(std::move(v), true);
    return n;
}

Var constant(Mat v) { return std::make_shared<Node>(std::move(v), false); }

Var scalar(double v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(m);
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    return make_node(a->val + b->val, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad);
        if (b->needs_grad) b->accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    return make_node(a->val - b->val, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad);
        if (b->needs_grad) b->accumulate(-n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    return make_node(a->val.cwiseProduct(b->val), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad.cwiseProduct(b->val));
        if (b->needs_grad) b->accumulate(n.grad.cwiseProduct(a->val));
    });
}

Var scale(const Var& a, double s) {
    return make_node(a->val * s, {a}, [a, s](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad * s);
    });
}

Var add_rowvec(const Var& a, const Var& b) {
    if (b->rows() != 1 || b->cols() != a->cols())
        throw ShapeMismatch("add_rowvec: b must be 1 x cols(a)");
    return make_node(a->val.rowwise() + b->val.row(0), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad);
        if (b->needs_grad) b->accumulate(n.grad.colwise().sum());
    });
}

Var mul_rowvec(const Var& a, const Var& b) {
    if (b->rows() != 1 || b->cols() != a->cols())
        throw ShapeMismatch("mul_rowvec: b must be 1 x cols(a)");
    Mat out = a->val.array().rowwise() * b->val.row(0).array();
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad.array().rowwise() * b->val.row(0).array());
        if (b->needs_grad) b->accumulate(n.grad.cwiseProduct(a->val).colwise().sum());
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a->cols() != b->rows()) throw ShapeMismatch("matmul: inner dims disagree");
    return make_node(a->val * b->val, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad * b->val.transpose());
        if (b->needs_grad) b->accumulate(a->val.transpose() * n.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->cols() != b->cols()) throw ShapeMismatch("matmul_nt: inner dims disagree");
    return make_node(a->val * b->val.transpose(), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad * b->val);
        if (b->needs_grad) b->accumulate(n.grad.transpose() * a->val);
    });
}

Var rows(const Var& a, int r0, int n) {
    if (r0 < 0 || n < 0 || r0 + n > a->rows()) throw ShapeMismatch("rows: range out of bounds");
    return make_node(a->val.middleRows(r0, n), {a}, [a, r0, n](Node& nd) {
        if (!a->needs_grad) return;
        Mat g = Mat::Zero(a->rows(), a->cols());
        g.middleRows(r0, n) = nd.grad;
        a->accumulate(g);
    });
}

Var cols(const Var& a, int c0, int n) {
    if (c0 < 0 || n < 0 || c0 + n > a->cols()) throw ShapeMismatch("cols: range out of bounds");
    return make_node(a->val.middleCols(c0, n), {a}, [a, c0, n](Node& nd) {
        if (!a->needs_grad) return;
        Mat g = Mat::Zero(a->rows(), a->cols());
        g.middleCols(c0, n) = nd.grad;
        a->accumulate(g);
    });
}

Var vconcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("vconcat: empty");
    int total = 0;
    const int c = parts[0]->cols();
    for (const auto& p : parts) {
        if (p->cols() != c) throw ShapeMismatch("vconcat: column mismatch");
        total += p->rows();
    }
    Mat out(total, c);
    int r = 0;
    for (const auto& p : parts) {
        if (p->rows() > 0) out.middleRows(r, p->rows()) = p->val;
        r += p->rows();
    }
    return make_node(std::move(out), parts, [parts](Node& n) {
        int r0 = 0;
        for (const auto& p : parts) {
            if (p->needs_grad && p->rows() > 0)
                p->accumulate(n.grad.middleRows(r0, p->rows()));
            r0 += p->rows();
        }
    });
}

Var hconcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeMismatch("hconcat: empty");
    int total = 0;
    const int r = parts[0]->rows();
    for (const auto& p : parts) {
        if (p->rows() != r) throw ShapeMismatch("hconcat: row mismatch");
        total += p->cols();
    }
    Mat out(r, total);
    int c = 0;
    for (const auto& p : parts) {
        if (p->cols() > 0) out.middleCols(c, p->cols()) = p->val;
        c += p->cols();
    }
    return make_node(std::move(out), parts, [parts](Node& n) {
        int c0 = 0;
        for (const auto& p : parts) {
            if (p->needs_grad && p->cols() > 0)
                p->accumulate(n.grad.middleCols(c0, p->cols()));
            c0 += p->cols();
        }
    });
}

Var row_softmax(const Var& a) {
    Mat out(a->rows(), a->cols());
    for (int i = 0; i < a->rows(); ++i) {
        const double m = a->val.row(i).maxCoeff();
        Eigen::RowVectorXd e = (a->val.row(i).array() - m).exp();
        out.row(i) = e / e.sum();
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        Mat g(n.val.rows(), n.val.cols());
        for (int i = 0; i < n.val.rows(); ++i) {
            const auto p = n.val.row(i);
            const double dot = n.grad.row(i).cwiseProduct(p).sum();
            g.row(i) = p.cwiseProduct((n.grad.row(i).array() - dot).matrix());
        }
        a->accumulate(g);
    });
}

Var causal_row_softmax(const Var& a) {
    if (a->rows() != a->cols()) throw ShapeMismatch("causal_row_softmax: square input expected");
    const int t = a->rows();
    Mat out = Mat::Zero(t, t);
    for (int i = 0; i < t; ++i) {
        const int w = i + 1;
        const double m = a->val.row(i).head(w).maxCoeff();
        Eigen::RowVectorXd e = (a->val.row(i).head(w).array() - m).exp();
        out.row(i).head(w) = e / e.sum();
    }
    return make_node(std::move(out), {a}, [a, t](Node& n) {
        if (!a->needs_grad) return;
        Mat g = Mat::Zero(t, t);
        for (int i = 0; i < t; ++i) {
            const int w = i + 1;
            const auto p = n.val.row(i).head(w);
            const double dot = n.grad.row(i).head(w).cwiseProduct(p).sum();
            g.row(i).head(w) =
                p.cwiseProduct((n.grad.row(i).head(w).array() - dot).matrix());
        }
        a->accumulate(g);
    });
}

Var row_l2_normalize(const Var& a, double eps) {
    Mat out(a->rows(), a->cols());
    Eigen::VectorXd norms(a->rows());
    for (int i = 0; i < a->rows(); ++i) {
        norms(i) = std::sqrt(a->val.row(i).squaredNorm() + eps);
        out.row(i) = a->val.row(i) / norms(i);
    }
    return make_node(std::move(out), {a}, [a, norms](Node& n) {
        if (!a->needs_grad) return;
        Mat g(n.val.rows(), n.val.cols());
        for (int i = 0; i < n.val.rows(); ++i) {
            const auto y = n.val.row(i);
            const double dot = n.grad.row(i).cwiseProduct(y).sum();
            g.row(i) = (n.grad.row(i) - dot * y) / norms(i);
        }
        a->accumulate(g);
    });
}

Var layer_norm_rows(const Var& a, double eps) {
    const int c = a->cols();
    Mat out(a->rows(), c);
    Eigen::VectorXd inv_std(a->rows());
    for (int i = 0; i < a->rows(); ++i) {
        const double mu = a->val.row(i).mean();
        Eigen::RowVectorXd d = a->val.row(i).array() - mu;
        const double var = d.squaredNorm() / c;
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        out.row(i) = d * inv_std(i);
    }
    return make_node(std::move(out), {a}, [a, inv_std, c](Node& n) {
        if (!a->needs_grad) return;
        Mat g(n.val.rows(), c);
        for (int i = 0; i < n.val.rows(); ++i) {
            const auto y = n.val.row(i);
            const auto gr = n.grad.row(i);
            const double gmean = gr.mean();
            const double gymean = gr.cwiseProduct(y).mean();
            g.row(i) = inv_std(i) * (gr.array() - gmean - y.array() * gymean).matrix();
        }
        a->accumulate(g);
    });
}

Var quick_gelu(const Var& a) {
    Mat s = (1.0 / (1.0 + (-1.702 * a->val.array()).exp())).matrix();
    Mat out = a->val.cwiseProduct(s);
    return make_node(std::move(out), {a}, [a, s](Node& n) {
        if (!a->needs_grad) return;
        Mat d = s.array() + 1.702 * a->val.array() * s.array() * (1.0 - s.array());
        a->accumulate(n.grad.cwiseProduct(d));
    });
}

Var exp(const Var& a) {
    Mat out = a->val.array().exp();
    return make_node(std::move(out), {a}, [a](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad.cwiseProduct(n.val));
    });
}

Var log_maxeps(const Var& a, double eps) {
    Mat out = a->val.array().max(eps).log();
    return make_node(std::move(out), {a}, [a, eps](Node& n) {
        if (!a->needs_grad) return;
        Mat d = (a->val.array() > eps).cast<double>() / a->val.array().max(eps);
        a->accumulate(n.grad.cwiseProduct(d));
    });
}

Var pow_const(const Var& a, double p) {
    Mat out = a->val.array().pow(p);
    return make_node(std::move(out), {a}, [a, p](Node& n) {
        if (!a->needs_grad) return;
        if (p == 0.0) return;
        Mat d(a->rows(), a->cols());
        for (int i = 0; i < a->rows(); ++i)
            for (int j = 0; j < a->cols(); ++j) {
                const double x = a->val(i, j);
                d(i, j) = (x <= 0.0 && p < 1.0) ? 0.0 : p * std::pow(x, p - 1.0);
            }
        a->accumulate(n.grad.cwiseProduct(d));
    });
}

Var clamp(const Var& a, double lo, double hi) {
    Mat out = a->val.array().max(lo).min(hi);
    return make_node(std::move(out), {a}, [a, lo, hi](Node& n) {
        if (!a->needs_grad) return;
        Mat pass = ((a->val.array() > lo) && (a->val.array() < hi)).cast<double>();
        a->accumulate(n.grad.cwiseProduct(pass));
    });
}

Var div_scalar(const Var& a, const Var& s) {
    if (s->rows() != 1 || s->cols() != 1) throw ShapeMismatch("div_scalar: s must be 1x1");
    const double sv = s->val(0, 0);
    return make_node(a->val / sv, {a, s}, [a, s, sv](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad / sv);
        if (s->needs_grad) {
            Mat g(1, 1);
            g(0, 0) = -n.grad.cwiseProduct(a->val).sum() / (sv * sv);
            s->accumulate(g);
        }
    });
}

Var add_const(const Var& a, double c) {
    return make_node(a->val.array() + c, {a}, [a](Node& n) {
        if (a->needs_grad) a->accumulate(n.grad);
    });
}

Var sum(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->val.sum();
    return make_node(std::move(out), {a}, [a](Node& n) {
        if (a->needs_grad)
            a->accumulate(Mat::Constant(a->rows(), a->cols(), n.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a->val.size());
    Mat out(1, 1);
    out(0, 0) = a->val.sum() * inv;
    return make_node(std::move(out), {a}, [a, inv](Node& n) {
        if (a->needs_grad)
            a->accumulate(Mat::Constant(a->rows(), a->cols(), n.grad(0, 0) * inv));
    });
}

namespace {

struct BilinearTap {
    int idx[4];
    double w[4];
};

// Precomputed taps per (H, W, h, w); reused across every map in a run.
const std::vector<BilinearTap>& bilinear_taps(int H, int W, int h, int w) {
    static std::map<std::tuple<int, int, int, int>, std::vector<BilinearTap>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(H, W, h, w);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    std::vector<BilinearTap> taps(static_cast<std::size_t>(h) * w);
    const double sy = static_cast<double>(H) / h;
    const double sx = static_cast<double>(W) / w;
    for (int y = 0; y < h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double ty = fy - y0;
        int y1 = y0 + 1;
        y0 = std::clamp(y0, 0, H - 1);
        y1 = std::clamp(y1, 0, H - 1);
        for (int x = 0; x < w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double tx = fx - x0;
            int x1 = x0 + 1;
            x0 = std::clamp(x0, 0, W - 1);
            x1 = std::clamp(x1, 0, W - 1);
            BilinearTap& t = taps[static_cast<std::size_t>(y) * w + x];
            t.idx[0] = y0 * W + x0;
            t.idx[1] = y0 * W + x1;
            t.idx[2] = y1 * W + x0;
            t.idx[3] = y1 * W + x1;
            t.w[0] = (1 - ty) * (1 - tx);
            t.w[1] = (1 - ty) * tx;
            t.w[2] = ty * (1 - tx);
            t.w[3] = ty * tx;
        }
    }
    return cache.emplace(key, std::move(taps)).first->second;
}

}  // namespace

Var upsample_bilinear(const Var& a, int H, int W, int h, int w) {
    if (a->rows() != H * W) throw ShapeMismatch("upsample_bilinear: rows != H*W");
    const auto& taps = bilinear_taps(H, W, h, w);
    const int K = a->cols();
    Mat out(h * w, K);
    for (std::size_t q = 0; q < taps.size(); ++q) {
        const auto& t = taps[q];
        out.row(static_cast<int>(q)) = t.w[0] * a->val.row(t.idx[0]) + t.w[1] * a->val.row(t.idx[1]) +
                                       t.w[2] * a->val.row(t.idx[2]) + t.w[3] * a->val.row(t.idx[3]);
    }
    return make_node(std::move(out), {a}, [a, H, W, h, w](Node& n) {
        if (!a->needs_grad) return;
        const auto& t2 = bilinear_taps(H, W, h, w);
        Mat g = Mat::Zero(a->rows(), a->cols());
        for (std::size_t q = 0; q < t2.size(); ++q) {
            const auto& t = t2[q];
            for (int j = 0; j < 4; ++j) g.row(t.idx[j]) += t.w[j] * n.grad.row(static_cast<int>(q));
        }
        a->accumulate(g);
    });
}

Var conv1d_k3(const Var& x, const Var& k, const Var& b) {
    if (x->rows() != 1) throw ShapeMismatch("conv1d_k3: x must be a single row");
    if (k->cols() != 3) throw ShapeMismatch("conv1d_k3: kernels must have width 3");
    if (b->rows() != k->rows() || b->cols() != 1)
        throw ShapeMismatch("conv1d_k3: bias must be r x 1");
    const int C = x->cols();
    const int r = k->rows();
    auto xp = [&](int j) -> double { return (j < 0 || j >= C) ? 0.0 : x->val(0, j); };
    Mat out(r, C);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < C; ++j)
            out(i, j) = b->val(i, 0) + k->val(i, 0) * xp(j - 1) + k->val(i, 1) * xp(j) +
                        k->val(i, 2) * xp(j + 1);
    return make_node(std::move(out), {x, k, b}, [x, k, b, C, r](Node& n) {
        auto xp = [&](int j) -> double { return (j < 0 || j >= C) ? 0.0 : x->val(0, j); };
        if (b->needs_grad) {
            Mat gb(r, 1);
            for (int i = 0; i < r; ++i) gb(i, 0) = n.grad.row(i).sum();
            b->accumulate(gb);
        }
        if (k->needs_grad) {
            Mat gk = Mat::Zero(r, 3);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < C; ++j)
                    for (int t = 0; t < 3; ++t) gk(i, t) += n.grad(i, j) * xp(j + t - 1);
            k->accumulate(gk);
        }
        if (x->needs_grad) {
            Mat gx = Mat::Zero(1, C);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < C; ++j)
                    for (int t = 0; t < 3; ++t) {
                        const int m = j + t - 1;
                        if (m >= 0 && m < C) gx(0, m) += n.grad(i, j) * k->val(i, t);
                    }
            x->accumulate(gx);
        }
    });
}

void backward(const Var& root) {
    if (root->rows() != 1 || root->cols() != 1)
        throw ShapeMismatch("backward: root must be a 1x1 scalar");
    if (!root->needs_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Var> stack{root};
    std::vector<Var> keepalive;
    while (!stack.empty()) {
        Var v = stack.back();
        stack.pop_back();
        if (!seen.insert(v.get()).second) continue;
        keepalive.push_back(v);
        order.push_back(v.get());
        for (const auto& p : v->parents)
            if (p->needs_grad && !seen.count(p.get())) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->seq > b->seq; });

    root->accumulate(Mat::Ones(1, 1));
    for (Node* n : order)
        if (n->has_grad() && n->backprop) n->backprop(*n);
}

}  // namespace vcpseg::ad
