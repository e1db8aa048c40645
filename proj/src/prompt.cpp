#include "vcpseg/prompt.hpp"

#include "vcpseg/errors.hpp"

#include <sstream>

namespace vcpseg {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;

std::string PromptTemplate::render(const std::string& state_word) const {
    const std::string placeholder = "[state]";
    const auto pos = text.find(placeholder);
    if (pos == std::string::npos)
        throw ConfigError("prompt template must contain the [state] placeholder");
    std::string out = text;
    out.replace(pos, placeholder.size(), state_word);
    return out;
}

std::vector<std::string> PromptTemplate::vocabulary_words() const {
    std::vector<std::string> words;
    for (const auto& state : {normal_word, abnormal_word}) {
        std::istringstream is(render(state));
        std::string w;
        while (is >> w) words.push_back(w);
    }
    return words;
}

PromptParams init_prompt_params(const BackboneConfig& cfg, int category_width, int deep_width,
                                bool adapter, Rng& rng) {
    if (category_width < 1) throw ConfigError("category width r must be >= 1");
    if (deep_width < 0) throw ConfigError("deep prompt width n must be >= 0");
    if (!adapter && cfg.joint_dim != cfg.text_width)
        throw ConfigError("mini-net requires joint_dim == text_width (" +
                          std::to_string(cfg.joint_dim) + " != " + std::to_string(cfg.text_width) +
                          "); enable the visual adapter to bridge them");

    auto gauss = [&rng](int r, int c, double stddev) {
        MatrixXd m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = rng.gaussian(0.0, stddev);
        return m;
    };

    PromptParams p;
    p.category_width = category_width;
    p.deep_width = deep_width;
    p.context = ad::leaf(gauss(category_width, cfg.text_width, 0.02));
    for (int i = 0; i < cfg.text_layers; ++i)
        p.deep_bank.push_back(ad::leaf(gauss(deep_width, cfg.text_width, 0.02)));
    p.mini_w = ad::leaf(gauss(category_width, 3, 0.02));
    p.mini_b = ad::leaf(MatrixXd::Zero(category_width, 1));
    if (adapter) {
        p.adapter_w = ad::leaf(gauss(cfg.joint_dim, cfg.text_width, 1.0 / std::sqrt(cfg.joint_dim)));
        p.adapter_b = ad::leaf(MatrixXd::Zero(1, cfg.text_width));
    }
    return p;
}

ad::Var mini_net_forward_ad(const PromptParams& p, const ad::Var& global_row) {
    ad::Var x = global_row;
    if (p.has_adapter()) x = ad::add_rowvec(ad::matmul(x, p.adapter_w), p.adapter_b);
    return ad::conv1d_k3(x, p.mini_w, p.mini_b);
}

MatrixXd mini_net_forward(const PromptParams& p, const RowVectorXd& global_row) {
    return mini_net_forward_ad(p, ad::constant(global_row))->val;
}

ad::Var fuse_visual_context_ad(const ad::Var& context, const ad::Var& mapped) {
    return ad::add(context, mapped);
}

MatrixXd fuse_visual_context(const MatrixXd& context, const MatrixXd& mapped) {
    if (context.rows() != mapped.rows() || context.cols() != mapped.cols())
        throw ShapeMismatch("fuse_visual_context: shape mismatch");
    return context + mapped;
}

EmbeddingSequence build_prompt_sequence(const Backbone& bb, const Tokenizer& tk,
                                        const PromptTemplate& tpl, const std::string& state_word,
                                        const MatrixXd& category_rows, int deep_width,
                                        DtpPlacement placement) {
    const int r = static_cast<int>(category_rows.rows());
    if (r != tpl.category_width)
        throw ConfigError("category rows disagree with the template width");
    if (category_rows.cols() != bb.config().text_width)
        throw ShapeMismatch("category rows must be r x C");

    const TokenSequence tokens = tk.encode(tpl.render(state_word));
    const int t = static_cast<int>(tokens.ids.size());
    const int n = deep_width;
    if (1 + n + t + r + 1 > bb.config().context_length)
        throw OverlongPrompt("prompt layout of " + std::to_string(1 + n + t + r + 1) +
                             " rows exceeds context length 77");

    EmbeddingSequence seq;
    seq.rows = MatrixXd::Zero(bb.config().context_length, bb.config().text_width);
    seq.sos_index = 0;
    seq.rows.row(0) = bb.token_embedding(tk.sos_id());

    int cursor = 1;
    if (placement == DtpPlacement::kPre) {
        seq.deep_start = cursor;
        seq.deep_len = n;
        cursor += n;
    }
    seq.text_start = cursor;
    seq.text_len = t;
    for (int i = 0; i < t; ++i)
        seq.rows.row(cursor++) = bb.token_embedding(tokens.ids[static_cast<std::size_t>(i)]);
    seq.cat_start = cursor;
    seq.cat_len = r;
    seq.rows.middleRows(cursor, r) = category_rows;
    cursor += r;
    if (placement == DtpPlacement::kPost) {
        seq.deep_start = cursor;
        seq.deep_len = n;
        cursor += n;
    }
    seq.eos_index = cursor;
    seq.rows.row(cursor) = bb.token_embedding(tk.eos_id());
    seq.pad_start = cursor + 1;
    return seq;
}

PromptPair build_prompt_pair(const Backbone& bb, const Tokenizer& tk, const PromptTemplate& tpl,
                             const MatrixXd& category_rows, int deep_width,
                             DtpPlacement placement) {
    PromptPair pair;
    pair.normal =
        build_prompt_sequence(bb, tk, tpl, tpl.normal_word, category_rows, deep_width, placement);
    pair.abnormal = build_prompt_sequence(bb, tk, tpl, tpl.abnormal_word, category_rows,
                                          deep_width, placement);
    return pair;
}

ad::Var sequence_with_category_ad(const EmbeddingSequence& base, const ad::Var& category_rows) {
    if (category_rows->rows() != base.cat_len)
        throw ShapeMismatch("category span width mismatch");
    const int total = base.length();
    ad::Var head = ad::constant(base.rows.topRows(base.cat_start));
    ad::Var tail = ad::constant(base.rows.bottomRows(total - base.cat_start - base.cat_len));
    return ad::vconcat({head, category_rows, tail});
}

ad::Var encode_prompt_ad(const Backbone& bb, const EmbeddingSequence& layout, const ad::Var& seq,
                         const std::vector<ad::Var>& deep_bank) {
    const int total = layout.length();
    const int n = layout.deep_len;
    if (n > 0 && static_cast<int>(deep_bank.size()) != bb.config().text_layers)
        throw ConfigError("deep prompt bank must hold one matrix per text layer");
    for (const auto& p : deep_bank)
        if (n > 0 && (p->rows() != n || p->cols() != bb.config().text_width))
            throw ConfigError("deep prompt entries must be n x C");

    ad::Var x = ad::add(seq, ad::constant(bb.text_positional()));
    for (int i = 1; i <= bb.config().text_layers; ++i) {
        if (n > 0) {
            // write P_{i-1} into the slot; whatever the previous layer emitted
            // there is dropped
            const auto& p = deep_bank[static_cast<std::size_t>(i - 1)];
            ad::Var head = ad::rows(x, 0, layout.deep_start);
            ad::Var tail = ad::rows(x, layout.deep_start + n, total - layout.deep_start - n);
            x = ad::vconcat({head, p, tail});
        }
        x = bb.text_layer_forward_ad(i, x);
    }
    return bb.text_head_ad(ad::rows(x, layout.eos_index, 1));
}

MatrixXd encode_prompts(const Backbone& bb, const PromptPair& pair,
                        const std::vector<MatrixXd>& deep_bank) {
    std::vector<ad::Var> bank;
    bank.reserve(deep_bank.size());
    for (const auto& m : deep_bank) bank.push_back(ad::constant(m));
    MatrixXd ft(2, bb.config().text_width);
    ft.row(0) =
        encode_prompt_ad(bb, pair.normal, ad::constant(pair.normal.rows), bank)->val.row(0);
    ft.row(1) =
        encode_prompt_ad(bb, pair.abnormal, ad::constant(pair.abnormal.rows), bank)->val.row(0);
    return ft;
}

}  // namespace vcpseg
