#pragma once

#include "vcpseg/archive.hpp"
#include "vcpseg/autodiff.hpp"
#include "vcpseg/tokenizer.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace vcpseg {

struct BackboneConfig {
    int text_layers = 4;
    int text_width = 64;    // C
    int text_heads = 4;
    int context_length = 77;
    int vocab_size = 0;
    int image_layers = 4;
    int image_width = 64;   // d_I
    int image_heads = 4;
    int joint_dim = 64;     // d_joint
    int patch_size = 16;
    int image_h = 64;
    int image_w = 64;
    std::vector<int> tap_layers{2, 4};

    int grid_h() const { return image_h / patch_size; }
    int grid_w() const { return image_w / patch_size; }
    void validate() const;  // throws ConfigError on any violated invariant
};

enum class DtpPlacement { kPre, kPost };

// 77 x C embedding rows plus the index map of the prompt layout.
struct EmbeddingSequence {
    Eigen::MatrixXd rows;
    int sos_index = 0;
    int eos_index = 0;
    int deep_start = 0, deep_len = 0;  // deep-prompt slot
    int text_start = 0, text_len = 0;  // word-token block
    int cat_start = 0, cat_len = 0;    // learnable category slot
    int pad_start = 0;                 // pad span is [pad_start, 77)

    int length() const { return static_cast<int>(rows.rows()); }
};

// Standardized image, pixel rows in y*w+x order, RGB columns.
struct ImageTensor {
    int h = 0, w = 0;
    Eigen::MatrixXd px;  // (h*w) x 3
};

struct VisualOutput {
    Eigen::RowVectorXd global;                // 1 x d_joint, projected class token
    std::vector<Eigen::MatrixXd> patch_maps;  // one (H*W) x d_I grid per tap
    std::vector<int> tap_layers;
    int grid_h = 0, grid_w = 0;
};

// Frozen dual encoder. Immutable after construction; all forwards are pure,
// so instances can be shared read-only across threads.
class Backbone {
public:
    static std::shared_ptr<Backbone> random(const BackboneConfig& cfg, std::uint64_t seed);
    // desired_image_size > 0 re-grids the visual positional table when the
    // archive was produced for a different resolution.
    static std::shared_ptr<Backbone> load(const std::string& path, int desired_image_size = 0,
                                          const std::vector<int>& tap_override = {});
    static BackboneConfig infer_config(const ArchiveIndex& index);

    void save(const std::string& path, const std::string& dtype = "f32") const;
    std::uint64_t content_hash() const;

    const BackboneConfig& config() const { return cfg_; }

    // --- text side -------------------------------------------------------
    // [SOS][deep slot, zero][tokens][EOS][zero pads] (placement kPre), or the
    // slot between tokens and EOS (kPost). No positional rows are added here;
    // pad rows are exactly zero.
    EmbeddingSequence embed_tokens(const TokenSequence& tokens, int deep_width,
                                   DtpPlacement placement = DtpPlacement::kPre) const;

    // One causal transformer block, 1-based index. Index map is untouched.
    EmbeddingSequence text_layer_forward(int layer, const EmbeddingSequence& seq) const;
    ad::Var text_layer_forward_ad(int layer, const ad::Var& seq) const;

    // TextProj(Norm(row at eos_index)) for the final sequence.
    Eigen::RowVectorXd text_head(const EmbeddingSequence& seq_final) const;
    ad::Var text_head_ad(const ad::Var& eos_row) const;

    const Eigen::MatrixXd& token_embedding_table() const { return tok_embed_; }
    const Eigen::MatrixXd& text_positional() const { return text_pos_; }
    Eigen::RowVectorXd token_embedding(int id) const;
    double layer_norm_eps() const { return kLnEps; }

    // --- image side ------------------------------------------------------
    VisualOutput encode_image(const ImageTensor& image) const;
    VisualOutput encode_image(const ImageTensor& image, const std::vector<int>& taps) const;

    // Canonical (name, tensor) enumeration in serialization order. Mutating
    // through this is for construction and tests only; the trained artifact
    // never touches backbone weights.
    std::vector<std::pair<std::string, Eigen::MatrixXd*>> named_tensors();
    std::vector<std::pair<std::string, const Eigen::MatrixXd*>> named_tensors() const;

private:
    explicit Backbone(const BackboneConfig& cfg);
    void allocate();

    struct TextBlock {
        ad::Var wq, wk, wv, wo;       // C x C, applied as x * W^T
        ad::Var bq, bk, bv, bo;       // 1 x C
        ad::Var ln1w, ln1b, ln2w, ln2b;
        ad::Var fc1, fc2;             // (4C x C), (C x 4C)
        ad::Var b1, b2;               // 1 x 4C, 1 x C
    };
    struct VisBlock {
        Eigen::MatrixXd wq, wk, wv, wo;        // D x D
        Eigen::MatrixXd bq, bk, bv, bo;        // 1 x D
        Eigen::MatrixXd ln1w, ln1b, ln2w, ln2b;
        Eigen::MatrixXd fc1, fc2;              // (4D x D), (D x 4D)
        Eigen::MatrixXd b1, b2;                // 1 x 4D, 1 x D
    };

    Eigen::MatrixXd vis_block_forward(const VisBlock& blk, const Eigen::MatrixXd& x) const;

    static constexpr double kLnEps = 1e-5;

    BackboneConfig cfg_;
    Eigen::MatrixXd tok_embed_;  // vocab x C
    Eigen::MatrixXd text_pos_;   // 77 x C
    std::vector<TextBlock> text_blocks_;
    ad::Var text_lnf_w_, text_lnf_b_;  // 1 x C
    ad::Var text_proj_;                // C x C, applied as x * proj

    Eigen::MatrixXd vis_patch_;  // d_I x (3*p*p)
    Eigen::MatrixXd vis_cls_;    // 1 x d_I
    Eigen::MatrixXd vis_pos_;    // (1 + H*W) x d_I
    Eigen::MatrixXd vis_lnpre_w_, vis_lnpre_b_;
    std::vector<VisBlock> vis_blocks_;
    Eigen::MatrixXd vis_lnpost_w_, vis_lnpost_b_;
    Eigen::MatrixXd vis_proj_;  // d_I x d_joint
};

// Plain (tape-free) helpers shared by the image path and tests.
Eigen::MatrixXd layer_norm_rows_plain(const Eigen::MatrixXd& x, double eps);
Eigen::MatrixXd row_softmax_plain(const Eigen::MatrixXd& x);
Eigen::MatrixXd quick_gelu_plain(const Eigen::MatrixXd& x);

// Re-grids a (1 + Hs*Ws) x d positional table to (1 + Hd*Wd) x d by bilinear
// interpolation over the spatial part; the leading class row is kept.
Eigen::MatrixXd interpolate_positional_grid(const Eigen::MatrixXd& pos, int src_h, int src_w,
                                            int dst_h, int dst_w);

}  // namespace vcpseg
