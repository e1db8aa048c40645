#pragma once

#include "vcpseg/autodiff.hpp"
#include "vcpseg/backbone.hpp"
#include "vcpseg/tokenizer.hpp"
#include "vcpseg/util.hpp"

#include <memory>
#include <string>
#include <vector>

namespace vcpseg {

// Unified text prompt: one template with a [state] placeholder and r
// learnable category rows appended after the rendered words.
struct PromptTemplate {
    std::string text = "a photo of a [state]";
    std::string normal_word = "good";
    std::string abnormal_word = "damaged";
    int category_width = 2;  // r

    std::string render(const std::string& state_word) const;
    // every word both renderings can produce (feeds the toy vocabulary)
    std::vector<std::string> vocabulary_words() const;
};

// All trainable prompt-side parameters.
struct PromptParams {
    ad::Var context;                // V: r x C
    std::vector<ad::Var> deep_bank; // P_0..P_{N_t-1}, each n x C (empty when n = 0)
    ad::Var mini_w;                 // r x 3 kernels
    ad::Var mini_b;                 // r x 1
    ad::Var adapter_w;              // d_joint x C, only when the adapter is enabled
    ad::Var adapter_b;              // 1 x C
    int category_width = 0;         // r
    int deep_width = 0;             // n

    bool has_adapter() const { return adapter_w != nullptr; }
};

// Throws ConfigError when d_joint != C and no adapter is requested.
PromptParams init_prompt_params(const BackboneConfig& cfg, int category_width, int deep_width,
                                bool adapter, Rng& rng);

// Maps the global image embedding into r word-space rows (the mini-net).
ad::Var mini_net_forward_ad(const PromptParams& p, const ad::Var& global_row);
Eigen::MatrixXd mini_net_forward(const PromptParams& p, const Eigen::RowVectorXd& global_row);

// z_i = x_i + v_i
ad::Var fuse_visual_context_ad(const ad::Var& context, const ad::Var& mapped);
Eigen::MatrixXd fuse_visual_context(const Eigen::MatrixXd& context, const Eigen::MatrixXd& mapped);

struct PromptPair {
    EmbeddingSequence normal;
    EmbeddingSequence abnormal;
};

// Lays out [SOS][deep slot][rendered words][category rows][EOS][pads] for one
// state word; category rows are filled from category_rows.
EmbeddingSequence build_prompt_sequence(const Backbone& bb, const Tokenizer& tk,
                                        const PromptTemplate& tpl, const std::string& state_word,
                                        const Eigen::MatrixXd& category_rows, int deep_width,
                                        DtpPlacement placement);

PromptPair build_prompt_pair(const Backbone& bb, const Tokenizer& tk, const PromptTemplate& tpl,
                             const Eigen::MatrixXd& category_rows, int deep_width,
                             DtpPlacement placement);

// Replaces the category span of a laid-out sequence with differentiable rows.
ad::Var sequence_with_category_ad(const EmbeddingSequence& base, const ad::Var& category_rows);

// Runs the deep-prompted encoder: positional add, per-layer injection of the
// bank into the deep slot (outputs at the slot are discarded by the next
// injection), then the text head at the EOS row. Returns g as 1 x C.
ad::Var encode_prompt_ad(const Backbone& bb, const EmbeddingSequence& layout, const ad::Var& seq,
                         const std::vector<ad::Var>& deep_bank);

// F_t = [g_n; g_a], plain wrapper over the ad path.
Eigen::MatrixXd encode_prompts(const Backbone& bb, const PromptPair& pair,
                               const std::vector<Eigen::MatrixXd>& deep_bank);

}  // namespace vcpseg
