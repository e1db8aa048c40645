#include "vcpseg/convert.hpp"

#include "vcpseg/archive.hpp"
#include "vcpseg/errors.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

namespace vcpseg {

using Eigen::MatrixXd;
using nlohmann::json;

namespace {

struct StTensor {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0, end = 0;
};

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1F;
    std::uint32_t man = h & 0x3FF;
    std::uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while (!(man & 0x400)) {
                man <<= 1;
                --exp;
            }
            man &= 0x3FF;
            bits = sign | (exp << 23) | (man << 13);
        }
    } else if (exp == 0x1F) {
        bits = sign | 0x7F800000u | (man << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (man << 13);
    }
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

class SafetensorsFile {
public:
    explicit SafetensorsFile(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open safetensors file: " + path);
        std::uint64_t header_len = 0;
        f.read(reinterpret_cast<char*>(&header_len), 8);
        if (!f || header_len == 0 || header_len > (1ull << 31))
            throw DataError("corrupt safetensors header in " + path);
        std::string header(header_len, '\0');
        f.read(header.data(), static_cast<std::streamsize>(header_len));
        json j = json::parse(header);
        std::uint64_t body_size = 0;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "__metadata__") continue;
            StTensor t;
            t.dtype = it.value().at("dtype").get<std::string>();
            t.shape = it.value().at("shape").get<std::vector<std::int64_t>>();
            const auto offs = it.value().at("data_offsets").get<std::vector<std::uint64_t>>();
            t.begin = offs.at(0);
            t.end = offs.at(1);
            body_size = std::max(body_size, t.end);
            tensors_[it.key()] = std::move(t);
        }
        body_.resize(body_size);
        f.read(body_.data(), static_cast<std::streamsize>(body_size));
        if (static_cast<std::uint64_t>(f.gcount()) != body_size)
            throw DataError("truncated safetensors body in " + path);
    }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    MatrixXd matrix(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw CheckpointError(name, "missing in safetensors source");
        const StTensor& t = it->second;
        std::int64_t rows = t.shape.empty() ? 1 : t.shape[0];
        std::int64_t cols = 1;
        for (std::size_t i = 1; i < t.shape.size(); ++i) cols *= t.shape[i];
        MatrixXd m(rows, cols);
        const char* p = body_.data() + t.begin;
        const std::int64_t n = rows * cols;
        for (std::int64_t i = 0; i < n; ++i) {
            double v;
            if (t.dtype == "F32") {
                float f;
                std::memcpy(&f, p + i * 4, 4);
                v = f;
            } else if (t.dtype == "F16") {
                std::uint16_t h;
                std::memcpy(&h, p + i * 2, 2);
                v = f16_to_f32(h);
            } else if (t.dtype == "BF16") {
                std::uint16_t h;
                std::memcpy(&h, p + i * 2, 2);
                const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
                float f;
                std::memcpy(&f, &bits, 4);
                v = f;
            } else if (t.dtype == "F64") {
                std::memcpy(&v, p + i * 8, 8);
            } else {
                throw CheckpointError(name, "unsupported safetensors dtype " + t.dtype);
            }
            m(i / cols, i % cols) = v;
        }
        return m;
    }

    std::vector<std::int64_t> shape(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw CheckpointError(name, "missing in safetensors source");
        return it->second.shape;
    }

private:
    std::map<std::string, StTensor> tensors_;
    std::vector<char> body_;
};

MatrixXd vstack(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
}

}  // namespace

int convert_safetensors_backbone(const std::string& safetensors_path,
                                 const std::string& archive_path) {
    SafetensorsFile src(safetensors_path);
    ArchiveWriter out;
    int written = 0;
    auto put = [&](const std::string& name, const MatrixXd& m) {
        out.add(name, m, "f32");
        ++written;
    };

    // Some exports carry the text tower under a "text." prefix.
    const std::string tprefix = src.has("token_embedding.weight") ? "" : "text.";
    auto text_name = [&](const std::string& base) { return tprefix + base; };

    const MatrixXd tok = src.matrix(text_name("token_embedding.weight"));
    const int C = static_cast<int>(tok.cols());
    put("text.embed.tok", tok);
    put("text.embed.pos", src.matrix(text_name("positional_embedding")));

    int text_layers = 0;
    for (;; ++text_layers) {
        const std::string p =
            text_name("transformer.resblocks." + std::to_string(text_layers) + ".");
        if (!src.has(p + "ln_1.weight")) break;
    }
    if (text_layers == 0) throw CheckpointError("transformer.resblocks.0.ln_1.weight",
                                                "no text transformer blocks found");
    for (int i = 0; i < text_layers; ++i) {
        const std::string p = text_name("transformer.resblocks." + std::to_string(i) + ".");
        const std::string q = "text.layer." + std::to_string(i + 1) + ".";
        MatrixXd in_w = src.matrix(p + "attn.in_proj_weight");   // 3C x C
        MatrixXd in_b = src.matrix(p + "attn.in_proj_bias");     // 3C x 1
        MatrixXd out_w = src.matrix(p + "attn.out_proj.weight"); // C x C
        MatrixXd out_b = src.matrix(p + "attn.out_proj.bias");   // C x 1
        put(q + "attn.w", vstack(in_w, out_w));
        put(q + "attn.b", vstack(in_b, out_b));
        put(q + "ln1.w", src.matrix(p + "ln_1.weight"));
        put(q + "ln1.b", src.matrix(p + "ln_1.bias"));
        put(q + "ln2.w", src.matrix(p + "ln_2.weight"));
        put(q + "ln2.b", src.matrix(p + "ln_2.bias"));
        MatrixXd fc1 = src.matrix(p + "mlp.c_fc.weight");   // 4C x C
        MatrixXd fc2 = src.matrix(p + "mlp.c_proj.weight"); // C x 4C
        put(q + "mlp.w", vstack(fc1, fc2.transpose()));
        put(q + "mlp.b", vstack(src.matrix(p + "mlp.c_fc.bias"),
                                src.matrix(p + "mlp.c_proj.bias")));
    }
    put("text.ln_final.w", src.matrix(text_name("ln_final.weight")));
    put("text.ln_final.b", src.matrix(text_name("ln_final.bias")));
    put("text.proj", src.matrix(text_name("text_projection")));

    const auto conv_shape = src.shape("visual.conv1.weight");  // [D, 3, p, p]
    if (conv_shape.size() != 4) throw CheckpointError("visual.conv1.weight", "expected rank 4");
    const int D = static_cast<int>(conv_shape[0]);
    const int patch = static_cast<int>(conv_shape[2]);
    {
        MatrixXd m = src.matrix("visual.conv1.weight");  // D x 3p^2 after flatten
        out.add_with_shape("visual.embed.patch", m, {D, 3, patch, patch}, "f32");
        ++written;
    }
    put("visual.embed.cls", src.matrix("visual.class_embedding"));
    put("visual.embed.pos", src.matrix("visual.positional_embedding"));
    put("visual.ln_pre.w", src.matrix("visual.ln_pre.weight"));
    put("visual.ln_pre.b", src.matrix("visual.ln_pre.bias"));

    int vis_layers = 0;
    for (;; ++vis_layers) {
        const std::string p = "visual.transformer.resblocks." + std::to_string(vis_layers) + ".";
        if (!src.has(p + "ln_1.weight")) break;
    }
    for (int i = 0; i < vis_layers; ++i) {
        const std::string p = "visual.transformer.resblocks." + std::to_string(i) + ".";
        const std::string q = "visual.layer." + std::to_string(i + 1) + ".";
        put(q + "attn.w", vstack(src.matrix(p + "attn.in_proj_weight"),
                                 src.matrix(p + "attn.out_proj.weight")));
        put(q + "attn.b", vstack(src.matrix(p + "attn.in_proj_bias"),
                                 src.matrix(p + "attn.out_proj.bias")));
        put(q + "ln1.w", src.matrix(p + "ln_1.weight"));
        put(q + "ln1.b", src.matrix(p + "ln_1.bias"));
        put(q + "ln2.w", src.matrix(p + "ln_2.weight"));
        put(q + "ln2.b", src.matrix(p + "ln_2.bias"));
        MatrixXd fc2 = src.matrix(p + "mlp.c_proj.weight");
        put(q + "mlp.w", vstack(src.matrix(p + "mlp.c_fc.weight"), fc2.transpose()));
        put(q + "mlp.b", vstack(src.matrix(p + "mlp.c_fc.bias"),
                                src.matrix(p + "mlp.c_proj.bias")));
    }
    put("visual.ln_post.w", src.matrix("visual.ln_post.weight"));
    put("visual.ln_post.b", src.matrix("visual.ln_post.bias"));
    put("visual.proj", src.matrix("visual.proj"));

    // standard head width is 64 for these checkpoints
    out.set_meta("text_heads", std::to_string(std::max(1, C / 64)));
    out.set_meta("image_heads", std::to_string(std::max(1, D / 64)));
    out.write(archive_path);
    return written;
}

}  // namespace vcpseg
