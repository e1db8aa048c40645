#include "vcpseg/archive.hpp"

#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace vcpseg {

using nlohmann::ordered_json;

std::int64_t TensorDesc::element_count() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::size_t TensorDesc::byte_size() const {
    const std::size_t elem = (dtype == "f64") ? 8 : 4;
    return static_cast<std::size_t>(element_count()) * elem;
}

namespace {

constexpr const char* kMetaKey = "__meta__";

void validate_dtype(const std::string& name, const std::string& dtype) {
    if (dtype != "f32" && dtype != "f64")
        throw CheckpointError(name, "unsupported dtype " + dtype);
}

}  // namespace

ArchiveReader ArchiveReader::open(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(path, "cannot open archive");

    std::uint64_t header_len = 0;
    f.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!f || header_len == 0 || header_len > (1ull << 31))
        throw CheckpointError(path, "corrupt archive header length");

    std::string header(header_len, '\0');
    f.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw CheckpointError(path, "truncated archive header");

    ordered_json j;
    try {
        j = ordered_json::parse(header);
    } catch (const std::exception& e) {
        throw CheckpointError(path, std::string("bad header JSON: ") + e.what());
    }

    ArchiveReader r;
    std::size_t body_size = 0;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == kMetaKey) {
            for (auto mit = it.value().begin(); mit != it.value().end(); ++mit)
                r.index_.meta[mit.key()] = mit.value().get<std::string>();
            continue;
        }
        TensorDesc d;
        d.dtype = it.value().at("dtype").get<std::string>();
        validate_dtype(it.key(), d.dtype);
        d.shape = it.value().at("shape").get<std::vector<std::int64_t>>();
        d.offset = it.value().at("offset").get<std::uint64_t>();
        body_size = std::max(body_size, static_cast<std::size_t>(d.offset) + d.byte_size());
        r.index_.tensors[it.key()] = std::move(d);
    }

    r.body_.resize(body_size);
    f.read(r.body_.data(), static_cast<std::streamsize>(body_size));
    if (static_cast<std::size_t>(f.gcount()) != body_size)
        throw CheckpointError(path, "truncated archive body");
    return r;
}

Eigen::MatrixXd ArchiveReader::matrix(const std::string& name) const {
    auto it = index_.tensors.find(name);
    if (it == index_.tensors.end()) throw CheckpointError(name, "missing tensor");
    const TensorDesc& d = it->second;
    if (d.shape.empty()) throw CheckpointError(name, "scalar tensors unsupported");
    const std::int64_t rows = d.shape[0];
    std::int64_t cols = 1;
    for (std::size_t i = 1; i < d.shape.size(); ++i) cols *= d.shape[i];
    if (d.shape.size() == 1) cols = 1;

    Eigen::MatrixXd m(rows, cols);
    const char* src = body_.data() + d.offset;
    if (d.dtype == "f64") {
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j) {
                double v;
                std::memcpy(&v, src + (i * cols + j) * 8, 8);
                m(i, j) = v;
            }
    } else {
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j) {
                float v;
                std::memcpy(&v, src + (i * cols + j) * 4, 4);
                m(i, j) = static_cast<double>(v);
            }
    }
    return m;
}

Eigen::MatrixXd ArchiveReader::matrix(const std::string& name, int rows, int cols) const {
    Eigen::MatrixXd m = matrix(name);
    if (m.rows() != rows || m.cols() != cols)
        throw CheckpointError(name, "expected shape " + std::to_string(rows) + "x" +
                                        std::to_string(cols) + ", got " +
                                        std::to_string(m.rows()) + "x" +
                                        std::to_string(m.cols()));
    return m;
}

std::uint64_t ArchiveReader::content_hash() const {
    return fnv1a(body_.data(), body_.size());
}

void ArchiveWriter::add(const std::string& name, const Eigen::MatrixXd& m,
                        const std::string& dtype, bool flatten_vectors) {
    std::vector<std::int64_t> shape;
    if (flatten_vectors && m.cols() == 1 && m.rows() > 0)
        shape = {m.rows()};
    else
        shape = {m.rows(), m.cols()};
    add_with_shape(name, m, std::move(shape), dtype);
}

void ArchiveWriter::add_with_shape(const std::string& name, const Eigen::MatrixXd& m,
                                   std::vector<std::int64_t> shape, const std::string& dtype) {
    validate_dtype(name, dtype);
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    if (n != m.size())
        throw CheckpointError(name, "shape does not match element count");
    tensors_[name] = Pending{m, std::move(shape), dtype};
}

void ArchiveWriter::write(const std::string& path) const {
    ordered_json header;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors_) {
        ordered_json e;
        e["dtype"] = t.dtype;
        e["shape"] = t.shape;
        e["offset"] = offset;
        header[name] = e;
        offset += static_cast<std::uint64_t>(t.data.size()) * (t.dtype == "f64" ? 8 : 4);
    }
    if (!meta_.empty()) {
        ordered_json m;
        for (const auto& [k, v] : meta_) m[k] = v;
        header[kMetaKey] = m;
    }
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(path, "cannot open for writing");
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));

    for (const auto& [name, t] : tensors_) {
        const auto& m = t.data;
        if (t.dtype == "f64") {
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) {
                    const double v = m(i, j);
                    f.write(reinterpret_cast<const char*>(&v), 8);
                }
        } else {
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) {
                    const float v = static_cast<float>(m(i, j));
                    f.write(reinterpret_cast<const char*>(&v), 4);
                }
        }
    }
    if (!f) throw CheckpointError(path, "write failed");
}

}  // namespace vcpseg
