#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vcpseg {

// Single-file named-tensor container:
//   [u64 LE header length][header JSON][contiguous little-endian buffers]
// The header maps tensor name -> {dtype, shape, offset}; offsets are relative
// to the start of the body. dtype is "f32" or "f64". Matrices serialize
// row-major. Writers emit tensors in name order so identical contents give
// identical bytes.

struct TensorDesc {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t offset = 0;

    std::int64_t element_count() const;
    std::size_t byte_size() const;
};

// Header-level view; enough to infer model configuration without reading
// buffers.
struct ArchiveIndex {
    std::map<std::string, TensorDesc> tensors;
    std::map<std::string, std::string> meta;  // free-form string metadata

    bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

class ArchiveReader {
public:
    static ArchiveReader open(const std::string& path);

    const ArchiveIndex& index() const { return index_; }
    bool has(const std::string& name) const { return index_.has(name); }

    // Reshapes to (shape[0], product of trailing dims); rank-1 tensors load
    // as column vectors. Throws CheckpointError naming the tensor if absent.
    Eigen::MatrixXd matrix(const std::string& name) const;

    // Same, but enforces the expected shape.
    Eigen::MatrixXd matrix(const std::string& name, int rows, int cols) const;

    std::uint64_t content_hash() const;  // FNV-1a over the body bytes

private:
    ArchiveIndex index_;
    std::vector<char> body_;
};

class ArchiveWriter {
public:
    // Row-major serialization; shape defaults to {rows, cols} ({n} when the
    // matrix is a column vector and flatten_vectors is true).
    void add(const std::string& name, const Eigen::MatrixXd& m,
             const std::string& dtype = "f64", bool flatten_vectors = true);
    void add_with_shape(const std::string& name, const Eigen::MatrixXd& m,
                        std::vector<std::int64_t> shape, const std::string& dtype);
    void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }

    void write(const std::string& path) const;

private:
    struct Pending {
        Eigen::MatrixXd data;
        std::vector<std::int64_t> shape;
        std::string dtype;
    };
    std::map<std::string, Pending> tensors_;
    std::map<std::string, std::string> meta_;
};

}  // namespace vcpseg
