#include "vcpseg/backbone.hpp"

#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vcpseg {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;

void BackboneConfig::validate() const {
    if (text_layers <= 0 || text_width <= 0 || image_layers <= 0 || image_width <= 0 ||
        joint_dim <= 0 || patch_size <= 0 || vocab_size <= 0)
        throw ConfigError("backbone dimensions must be positive");
    if (context_length != 77) throw ConfigError("context_length is fixed at 77");
    if (text_width % text_heads != 0) throw ConfigError("text_width must divide by text_heads");
    if (image_width % image_heads != 0)
        throw ConfigError("image_width must divide by image_heads");
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
        throw ConfigError("image size must be divisible by patch_size");
    if (tap_layers.empty()) throw ConfigError("tap_layers must be non-empty");
    int prev = 0;
    for (int t : tap_layers) {
        if (t <= prev) throw ConfigError("tap_layers must be strictly increasing");
        if (t < 1 || t > image_layers) throw ConfigError("tap layer out of range");
        prev = t;
    }
}

MatrixXd layer_norm_rows_plain(const MatrixXd& x, double eps) {
    MatrixXd out(x.rows(), x.cols());
    const int c = static_cast<int>(x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        Eigen::RowVectorXd d = x.row(i).array() - mu;
        const double var = d.squaredNorm() / c;
        out.row(i) = d / std::sqrt(var + eps);
    }
    return out;
}

MatrixXd row_softmax_plain(const MatrixXd& x) {
    MatrixXd out(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        Eigen::RowVectorXd e = (x.row(i).array() - m).exp();
        out.row(i) = e / e.sum();
    }
    return out;
}

MatrixXd quick_gelu_plain(const MatrixXd& x) {
    return x.array() * (1.0 / (1.0 + (-1.702 * x.array()).exp()));
}

MatrixXd interpolate_positional_grid(const MatrixXd& pos, int src_h, int src_w, int dst_h,
                                     int dst_w) {
    if (pos.rows() != 1 + static_cast<long>(src_h) * src_w)
        throw ShapeMismatch("positional table does not match source grid");
    MatrixXd out(1 + static_cast<long>(dst_h) * dst_w, pos.cols());
    out.row(0) = pos.row(0);
    const double sy = static_cast<double>(src_h) / dst_h;
    const double sx = static_cast<double>(src_w) / dst_w;
    for (int y = 0; y < dst_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double ty = fy - y0;
        int y1 = std::clamp(y0 + 1, 0, src_h - 1);
        y0 = std::clamp(y0, 0, src_h - 1);
        for (int x = 0; x < dst_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double tx = fx - x0;
            int x1 = std::clamp(x0 + 1, 0, src_w - 1);
            x0 = std::clamp(x0, 0, src_w - 1);
            out.row(1 + y * dst_w + x) =
                (1 - ty) * ((1 - tx) * pos.row(1 + y0 * src_w + x0) +
                            tx * pos.row(1 + y0 * src_w + x1)) +
                ty * ((1 - tx) * pos.row(1 + y1 * src_w + x0) +
                      tx * pos.row(1 + y1 * src_w + x1));
        }
    }
    return out;
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    allocate();
}

void Backbone::allocate() {
    const int C = cfg_.text_width;
    const int D = cfg_.image_width;
    const int H = 4;  // MLP expansion factor

    tok_embed_ = MatrixXd::Zero(cfg_.vocab_size, C);
    text_pos_ = MatrixXd::Zero(cfg_.context_length, C);
    text_blocks_.clear();
    for (int i = 0; i < cfg_.text_layers; ++i) {
        TextBlock b;
        b.wq = ad::constant(MatrixXd::Zero(C, C));
        b.wk = ad::constant(MatrixXd::Zero(C, C));
        b.wv = ad::constant(MatrixXd::Zero(C, C));
        b.wo = ad::constant(MatrixXd::Zero(C, C));
        b.bq = ad::constant(MatrixXd::Zero(1, C));
        b.bk = ad::constant(MatrixXd::Zero(1, C));
        b.bv = ad::constant(MatrixXd::Zero(1, C));
        b.bo = ad::constant(MatrixXd::Zero(1, C));
        b.ln1w = ad::constant(MatrixXd::Ones(1, C));
        b.ln1b = ad::constant(MatrixXd::Zero(1, C));
        b.ln2w = ad::constant(MatrixXd::Ones(1, C));
        b.ln2b = ad::constant(MatrixXd::Zero(1, C));
        b.fc1 = ad::constant(MatrixXd::Zero(H * C, C));
        b.b1 = ad::constant(MatrixXd::Zero(1, H * C));
        b.fc2 = ad::constant(MatrixXd::Zero(C, H * C));
        b.b2 = ad::constant(MatrixXd::Zero(1, C));
        text_blocks_.push_back(std::move(b));
    }
    text_lnf_w_ = ad::constant(MatrixXd::Ones(1, C));
    text_lnf_b_ = ad::constant(MatrixXd::Zero(1, C));
    text_proj_ = ad::constant(MatrixXd::Zero(C, C));

    const int p2 = 3 * cfg_.patch_size * cfg_.patch_size;
    const long hw = static_cast<long>(cfg_.grid_h()) * cfg_.grid_w();
    vis_patch_ = MatrixXd::Zero(D, p2);
    vis_cls_ = MatrixXd::Zero(1, D);
    vis_pos_ = MatrixXd::Zero(1 + hw, D);
    vis_lnpre_w_ = MatrixXd::Ones(1, D);
    vis_lnpre_b_ = MatrixXd::Zero(1, D);
    vis_blocks_.assign(cfg_.image_layers, VisBlock{});
    for (auto& b : vis_blocks_) {
        b.wq = b.wk = b.wv = b.wo = MatrixXd::Zero(D, D);
        b.bq = b.bk = b.bv = b.bo = MatrixXd::Zero(1, D);
        b.ln1w = b.ln2w = MatrixXd::Ones(1, D);
        b.ln1b = b.ln2b = MatrixXd::Zero(1, D);
        b.fc1 = MatrixXd::Zero(H * D, D);
        b.b1 = MatrixXd::Zero(1, H * D);
        b.fc2 = MatrixXd::Zero(D, H * D);
        b.b2 = MatrixXd::Zero(1, D);
    }
    vis_lnpost_w_ = MatrixXd::Ones(1, D);
    vis_lnpost_b_ = MatrixXd::Zero(1, D);
    vis_proj_ = MatrixXd::Zero(D, cfg_.joint_dim);
}

std::vector<std::pair<std::string, MatrixXd*>> Backbone::named_tensors() {
    std::vector<std::pair<std::string, MatrixXd*>> out;
    out.emplace_back("text.embed.tok", &tok_embed_);
    out.emplace_back("text.embed.pos", &text_pos_);
    for (int i = 0; i < cfg_.text_layers; ++i) {
        const std::string p = "text.layer." + std::to_string(i + 1) + ".";
        TextBlock& b = text_blocks_[static_cast<std::size_t>(i)];
        out.emplace_back(p + "attn.wq", &b.wq->val);
        out.emplace_back(p + "attn.wk", &b.wk->val);
        out.emplace_back(p + "attn.wv", &b.wv->val);
        out.emplace_back(p + "attn.wo", &b.wo->val);
        out.emplace_back(p + "attn.bq", &b.bq->val);
        out.emplace_back(p + "attn.bk", &b.bk->val);
        out.emplace_back(p + "attn.bv", &b.bv->val);
        out.emplace_back(p + "attn.bo", &b.bo->val);
        out.emplace_back(p + "ln1.w", &b.ln1w->val);
        out.emplace_back(p + "ln1.b", &b.ln1b->val);
        out.emplace_back(p + "ln2.w", &b.ln2w->val);
        out.emplace_back(p + "ln2.b", &b.ln2b->val);
        out.emplace_back(p + "mlp.fc1", &b.fc1->val);
        out.emplace_back(p + "mlp.b1", &b.b1->val);
        out.emplace_back(p + "mlp.fc2", &b.fc2->val);
        out.emplace_back(p + "mlp.b2", &b.b2->val);
    }
    out.emplace_back("text.ln_final.w", &text_lnf_w_->val);
    out.emplace_back("text.ln_final.b", &text_lnf_b_->val);
    out.emplace_back("text.proj", &text_proj_->val);

    out.emplace_back("visual.embed.patch", &vis_patch_);
    out.emplace_back("visual.embed.cls", &vis_cls_);
    out.emplace_back("visual.embed.pos", &vis_pos_);
    out.emplace_back("visual.ln_pre.w", &vis_lnpre_w_);
    out.emplace_back("visual.ln_pre.b", &vis_lnpre_b_);
    for (int i = 0; i < cfg_.image_layers; ++i) {
        const std::string p = "visual.layer." + std::to_string(i + 1) + ".";
        VisBlock& b = vis_blocks_[static_cast<std::size_t>(i)];
        out.emplace_back(p + "attn.wq", &b.wq);
        out.emplace_back(p + "attn.wk", &b.wk);
        out.emplace_back(p + "attn.wv", &b.wv);
        out.emplace_back(p + "attn.wo", &b.wo);
        out.emplace_back(p + "attn.bq", &b.bq);
        out.emplace_back(p + "attn.bk", &b.bk);
        out.emplace_back(p + "attn.bv", &b.bv);
        out.emplace_back(p + "attn.bo", &b.bo);
        out.emplace_back(p + "ln1.w", &b.ln1w);
        out.emplace_back(p + "ln1.b", &b.ln1b);
        out.emplace_back(p + "ln2.w", &b.ln2w);
        out.emplace_back(p + "ln2.b", &b.ln2b);
        out.emplace_back(p + "mlp.fc1", &b.fc1);
        out.emplace_back(p + "mlp.b1", &b.b1);
        out.emplace_back(p + "mlp.fc2", &b.fc2);
        out.emplace_back(p + "mlp.b2", &b.b2);
    }
    out.emplace_back("visual.ln_post.w", &vis_lnpost_w_);
    out.emplace_back("visual.ln_post.b", &vis_lnpost_b_);
    out.emplace_back("visual.proj", &vis_proj_);
    return out;
}

std::vector<std::pair<std::string, const MatrixXd*>> Backbone::named_tensors() const {
    auto mut = const_cast<Backbone*>(this)->named_tensors();
    std::vector<std::pair<std::string, const MatrixXd*>> out;
    out.reserve(mut.size());
    for (auto& [n, m] : mut) out.emplace_back(n, m);
    return out;
}

std::shared_ptr<Backbone> Backbone::random(const BackboneConfig& cfg, std::uint64_t seed) {
    auto bb = std::shared_ptr<Backbone>(new Backbone(cfg));
    Rng rng(seed);

    auto fill = [&](MatrixXd& m, double stddev) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.gaussian(0.0, stddev);
    };

    const int C = cfg.text_width;
    const int D = cfg.image_width;
    fill(bb->tok_embed_, 0.02);
    fill(bb->text_pos_, 0.01);
    for (auto& b : bb->text_blocks_) {
        const double ws = 0.5 / std::sqrt(C);
        fill(b.wq->val, ws);
        fill(b.wk->val, ws);
        fill(b.wv->val, ws);
        fill(b.wo->val, ws);
        fill(b.fc1->val, ws);
        fill(b.fc2->val, 0.5 / std::sqrt(4.0 * C));
    }
    fill(bb->text_proj_->val, 1.0 / std::sqrt(C));

    fill(bb->vis_patch_, 1.0 / std::sqrt(3.0 * cfg.patch_size * cfg.patch_size));
    fill(bb->vis_cls_, 0.02);
    fill(bb->vis_pos_, 0.01);
    for (auto& b : bb->vis_blocks_) {
        const double ws = 0.5 / std::sqrt(D);
        fill(b.wq, ws);
        fill(b.wk, ws);
        fill(b.wv, ws);
        fill(b.wo, ws);
        fill(b.fc1, ws);
        fill(b.fc2, 0.5 / std::sqrt(4.0 * D));
    }
    fill(bb->vis_proj_, 1.0 / std::sqrt(D));
    return bb;
}

std::uint64_t Backbone::content_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, m] : named_tensors()) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(m->data(), sizeof(double) * static_cast<std::size_t>(m->size()), h);
    }
    return h;
}

EmbeddingSequence Backbone::embed_tokens(const TokenSequence& tokens, int deep_width,
                                         DtpPlacement placement) const {
    const int n = deep_width;
    const int t = static_cast<int>(tokens.ids.size());
    if (t == 0) throw OverlongPrompt("empty token sequence");
    if (n < 0) throw ConfigError("deep prompt width must be >= 0");
    if (1 + n + t + 1 > cfg_.context_length)
        throw OverlongPrompt("layout of " + std::to_string(1 + n + t + 1) +
                             " rows exceeds context length 77");
    for (int id : tokens.ids)
        if (id < 0 || id >= cfg_.vocab_size) throw ConfigError("token id out of range");

    EmbeddingSequence seq;
    seq.rows = MatrixXd::Zero(cfg_.context_length, cfg_.text_width);
    seq.sos_index = 0;
    seq.rows.row(0) = tok_embed_.row(0);  // id 0 is SOS by construction of both tokenizers

    if (placement == DtpPlacement::kPre) {
        seq.deep_start = 1;
        seq.deep_len = n;
        seq.text_start = 1 + n;
    } else {
        seq.text_start = 1;
        seq.deep_start = 1 + t;
        seq.deep_len = n;
    }
    seq.text_len = t;
    for (int i = 0; i < t; ++i)
        seq.rows.row(seq.text_start + i) = tok_embed_.row(tokens.ids[static_cast<std::size_t>(i)]);
    seq.eos_index = 1 + n + t;
    seq.rows.row(seq.eos_index) = tok_embed_.row(1);  // id 1 is EOS
    seq.cat_start = seq.eos_index;                    // empty span until a prompt inserts one
    seq.cat_len = 0;
    seq.pad_start = seq.eos_index + 1;
    return seq;
}

RowVectorXd Backbone::token_embedding(int id) const {
    if (id < 0 || id >= cfg_.vocab_size) throw ConfigError("token id out of range");
    return tok_embed_.row(id);
}

ad::Var Backbone::text_layer_forward_ad(int layer, const ad::Var& seq) const {
    if (layer < 1 || layer > cfg_.text_layers)
        throw InvalidLayer("text layer " + std::to_string(layer) + " out of range [1, " +
                           std::to_string(cfg_.text_layers) + "]");
    if (seq->cols() != cfg_.text_width || seq->rows() != cfg_.context_length)
        throw ShapeMismatch("text_layer_forward: sequence must be 77 x C");
    const TextBlock& blk = text_blocks_[static_cast<std::size_t>(layer - 1)];
    const int C = cfg_.text_width;
    const int heads = cfg_.text_heads;
    const int dh = C / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ad::Var h = ad::layer_norm_rows(seq, kLnEps);
    h = ad::add_rowvec(ad::mul_rowvec(h, blk.ln1w), blk.ln1b);
    ad::Var q = ad::add_rowvec(ad::matmul_nt(h, blk.wq), blk.bq);
    ad::Var k = ad::add_rowvec(ad::matmul_nt(h, blk.wk), blk.bk);
    ad::Var v = ad::add_rowvec(ad::matmul_nt(h, blk.wv), blk.bv);

    std::vector<ad::Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int m = 0; m < heads; ++m) {
        ad::Var qm = ad::cols(q, m * dh, dh);
        ad::Var km = ad::cols(k, m * dh, dh);
        ad::Var vm = ad::cols(v, m * dh, dh);
        ad::Var att = ad::causal_row_softmax(ad::scale(ad::matmul_nt(qm, km), scale));
        head_outs.push_back(ad::matmul(att, vm));
    }
    ad::Var att_out = ad::add_rowvec(ad::matmul_nt(ad::hconcat(head_outs), blk.wo), blk.bo);
    ad::Var x = ad::add(seq, att_out);

    ad::Var h2 = ad::layer_norm_rows(x, kLnEps);
    h2 = ad::add_rowvec(ad::mul_rowvec(h2, blk.ln2w), blk.ln2b);
    ad::Var m1 = ad::quick_gelu(ad::add_rowvec(ad::matmul_nt(h2, blk.fc1), blk.b1));
    ad::Var m2 = ad::add_rowvec(ad::matmul_nt(m1, blk.fc2), blk.b2);
    return ad::add(x, m2);
}

EmbeddingSequence Backbone::text_layer_forward(int layer, const EmbeddingSequence& seq) const {
    EmbeddingSequence out = seq;
    out.rows = text_layer_forward_ad(layer, ad::constant(seq.rows))->val;
    return out;
}

ad::Var Backbone::text_head_ad(const ad::Var& eos_row) const {
    if (eos_row->rows() != 1 || eos_row->cols() != cfg_.text_width)
        throw ShapeMismatch("text_head: expected a single 1 x C row");
    ad::Var h = ad::layer_norm_rows(eos_row, kLnEps);
    h = ad::add_rowvec(ad::mul_rowvec(h, text_lnf_w_), text_lnf_b_);
    return ad::matmul(h, text_proj_);
}

RowVectorXd Backbone::text_head(const EmbeddingSequence& seq_final) const {
    ad::Var row = ad::constant(seq_final.rows.row(seq_final.eos_index));
    return text_head_ad(row)->val.row(0);
}

MatrixXd Backbone::vis_block_forward(const VisBlock& blk, const MatrixXd& x) const {
    const int D = cfg_.image_width;
    const int heads = cfg_.image_heads;
    const int dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    MatrixXd h = layer_norm_rows_plain(x, kLnEps);
    h = ((h.array().rowwise() * blk.ln1w.row(0).array()).rowwise() + blk.ln1b.row(0).array()).matrix();
    MatrixXd q = (h * blk.wq.transpose()).rowwise() + blk.bq.row(0);
    MatrixXd k = (h * blk.wk.transpose()).rowwise() + blk.bk.row(0);
    MatrixXd v = (h * blk.wv.transpose()).rowwise() + blk.bv.row(0);

    MatrixXd concat(x.rows(), D);
    for (int m = 0; m < heads; ++m) {
        MatrixXd att = row_softmax_plain(scale * (q.middleCols(m * dh, dh) *
                                                  k.middleCols(m * dh, dh).transpose()));
        concat.middleCols(m * dh, dh) = att * v.middleCols(m * dh, dh);
    }
    MatrixXd out = x + ((concat * blk.wo.transpose()).rowwise() + blk.bo.row(0)).eval();

    MatrixXd h2 = layer_norm_rows_plain(out, kLnEps);
    h2 = ((h2.array().rowwise() * blk.ln2w.row(0).array()).rowwise() + blk.ln2b.row(0).array()).matrix();
    MatrixXd mid = quick_gelu_plain((h2 * blk.fc1.transpose()).rowwise() + blk.b1.row(0));
    return out + ((mid * blk.fc2.transpose()).rowwise() + blk.b2.row(0)).eval();
}

VisualOutput Backbone::encode_image(const ImageTensor& image) const {
    return encode_image(image, cfg_.tap_layers);
}

VisualOutput Backbone::encode_image(const ImageTensor& image, const std::vector<int>& taps) const {
    if (image.h != cfg_.image_h || image.w != cfg_.image_w ||
        image.px.rows() != static_cast<long>(image.h) * image.w || image.px.cols() != 3)
        throw ShapeMismatch("encode_image: expected " + std::to_string(cfg_.image_h) + "x" +
                            std::to_string(cfg_.image_w) + "x3 input");
    for (int t : taps)
        if (t < 1 || t > cfg_.image_layers)
            throw InvalidLayer("tap layer " + std::to_string(t) + " out of range");

    const int p = cfg_.patch_size;
    const int gh = cfg_.grid_h(), gw = cfg_.grid_w();
    const long hw = static_cast<long>(gh) * gw;

    MatrixXd patches(hw, 3 * p * p);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            long row = static_cast<long>(gy) * gw + gx;
            int col = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        patches(row, col++) =
                            image.px(static_cast<long>(gy * p + dy) * image.w + (gx * p + dx), c);
        }

    MatrixXd x(1 + hw, cfg_.image_width);
    x.row(0) = vis_cls_.row(0);
    x.bottomRows(hw) = patches * vis_patch_.transpose();
    x += vis_pos_;
    x = layer_norm_rows_plain(x, kLnEps);
    x = ((x.array().rowwise() * vis_lnpre_w_.row(0).array()).rowwise() +
         vis_lnpre_b_.row(0).array()).matrix();

    VisualOutput out;
    out.tap_layers = taps;
    out.grid_h = gh;
    out.grid_w = gw;
    for (int l = 1; l <= cfg_.image_layers; ++l) {
        x = vis_block_forward(vis_blocks_[static_cast<std::size_t>(l - 1)], x);
        if (std::find(taps.begin(), taps.end(), l) != taps.end())
            out.patch_maps.push_back(x.bottomRows(hw));
    }

    MatrixXd cls = layer_norm_rows_plain(x.topRows(1), kLnEps);
    cls = ((cls.array().rowwise() * vis_lnpost_w_.row(0).array()).rowwise() +
           vis_lnpost_b_.row(0).array()).matrix();
    out.global = (cls * vis_proj_).row(0);
    return out;
}

// --- serialization ---------------------------------------------------------

namespace {

MatrixXd pack_rows(const std::vector<const MatrixXd*>& parts) {
    long rows = 0;
    for (auto* m : parts) rows += m->rows();
    MatrixXd out(rows, parts[0]->cols());
    long r = 0;
    for (auto* m : parts) {
        out.middleRows(r, m->rows()) = *m;
        r += m->rows();
    }
    return out;
}

// stacks 1 x N row matrices into one column vector
MatrixXd col_from_rows(const std::vector<const MatrixXd*>& parts) {
    long n = 0;
    for (auto* v : parts) n += v->size();
    MatrixXd out(n, 1);
    long r = 0;
    for (auto* v : parts)
        for (Eigen::Index j = 0; j < v->cols(); ++j) out(r++, 0) = (*v)(0, j);
    return out;
}

}  // namespace

void Backbone::save(const std::string& path, const std::string& dtype) const {
    ArchiveWriter w;
    const int C = cfg_.text_width;
    const int D = cfg_.image_width;

    w.add("text.embed.tok", tok_embed_, dtype);
    w.add("text.embed.pos", text_pos_, dtype);
    for (int i = 0; i < cfg_.text_layers; ++i) {
        const auto& b = text_blocks_[static_cast<std::size_t>(i)];
        const std::string p = "text.layer." + std::to_string(i + 1) + ".";
        w.add(p + "attn.w", pack_rows({&b.wq->val, &b.wk->val, &b.wv->val, &b.wo->val}), dtype);
        MatrixXd attn_b(4 * C, 1);
        attn_b << b.bq->val.row(0).transpose(), b.bk->val.row(0).transpose(),
            b.bv->val.row(0).transpose(), b.bo->val.row(0).transpose();
        w.add(p + "attn.b", attn_b, dtype);
        w.add(p + "ln1.w", b.ln1w->val.transpose(), dtype);
        w.add(p + "ln1.b", b.ln1b->val.transpose(), dtype);
        w.add(p + "ln2.w", b.ln2w->val.transpose(), dtype);
        w.add(p + "ln2.b", b.ln2b->val.transpose(), dtype);
        MatrixXd fc2t = b.fc2->val.transpose();
        w.add(p + "mlp.w", pack_rows({&b.fc1->val, &fc2t}), dtype);
        MatrixXd mlp_b(4 * C + C, 1);
        mlp_b << b.b1->val.row(0).transpose(), b.b2->val.row(0).transpose();
        w.add(p + "mlp.b", mlp_b, dtype);
    }
    w.add("text.ln_final.w", text_lnf_w_->val.transpose(), dtype);
    w.add("text.ln_final.b", text_lnf_b_->val.transpose(), dtype);
    w.add("text.proj", text_proj_->val, dtype);

    w.add_with_shape("visual.embed.patch", vis_patch_,
                     {D, 3, cfg_.patch_size, cfg_.patch_size}, dtype);
    w.add("visual.embed.cls", vis_cls_.transpose(), dtype);
    w.add("visual.embed.pos", vis_pos_, dtype);
    w.add("visual.ln_pre.w", vis_lnpre_w_.transpose(), dtype);
    w.add("visual.ln_pre.b", vis_lnpre_b_.transpose(), dtype);
    for (int i = 0; i < cfg_.image_layers; ++i) {
        const auto& b = vis_blocks_[static_cast<std::size_t>(i)];
        const std::string p = "visual.layer." + std::to_string(i + 1) + ".";
        w.add(p + "attn.w", pack_rows({&b.wq, &b.wk, &b.wv, &b.wo}), dtype);
        w.add(p + "attn.b", col_from_rows({&b.bq, &b.bk, &b.bv, &b.bo}), dtype);
        w.add(p + "ln1.w", col_from_rows({&b.ln1w}), dtype);
        w.add(p + "ln1.b", col_from_rows({&b.ln1b}), dtype);
        w.add(p + "ln2.w", col_from_rows({&b.ln2w}), dtype);
        w.add(p + "ln2.b", col_from_rows({&b.ln2b}), dtype);
        MatrixXd fc2t = b.fc2.transpose();
        w.add(p + "mlp.w", pack_rows({&b.fc1, &fc2t}), dtype);
        w.add(p + "mlp.b", col_from_rows({&b.b1, &b.b2}), dtype);
    }
    w.add("visual.ln_post.w", col_from_rows({&vis_lnpost_w_}), dtype);
    w.add("visual.ln_post.b", col_from_rows({&vis_lnpost_b_}), dtype);
    w.add("visual.proj", vis_proj_, dtype);

    w.set_meta("text_heads", std::to_string(cfg_.text_heads));
    w.set_meta("image_heads", std::to_string(cfg_.image_heads));
    w.set_meta("image_size", std::to_string(cfg_.image_h));
    {
        std::string taps;
        for (std::size_t i = 0; i < cfg_.tap_layers.size(); ++i)
            taps += (i ? "," : "") + std::to_string(cfg_.tap_layers[i]);
        w.set_meta("tap_layers", taps);
    }
    w.write(path);
}

namespace {

int max_layer_index(const ArchiveIndex& idx, const std::string& prefix) {
    int best = 0;
    for (const auto& [name, _] : idx.tensors) {
        if (name.rfind(prefix, 0) != 0) continue;
        const std::size_t start = prefix.size();
        std::size_t end = name.find('.', start);
        if (end == std::string::npos) continue;
        try {
            best = std::max(best, std::stoi(name.substr(start, end - start)));
        } catch (...) {
        }
    }
    return best;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t j = s.find(',', i);
        if (j == std::string::npos) j = s.size();
        out.push_back(std::stoi(s.substr(i, j - i)));
        i = j + 1;
    }
    return out;
}

}  // namespace

BackboneConfig Backbone::infer_config(const ArchiveIndex& idx) {
    auto need = [&](const std::string& name) -> const TensorDesc& {
        auto it = idx.tensors.find(name);
        if (it == idx.tensors.end()) throw CheckpointError(name, "missing tensor");
        return it->second;
    };

    BackboneConfig cfg;
    const auto& tok = need("text.embed.tok");
    if (tok.shape.size() != 2) throw CheckpointError("text.embed.tok", "expected rank 2");
    cfg.vocab_size = static_cast<int>(tok.shape[0]);
    cfg.text_width = static_cast<int>(tok.shape[1]);
    cfg.context_length = static_cast<int>(need("text.embed.pos").shape[0]);
    cfg.text_layers = max_layer_index(idx, "text.layer.");
    cfg.image_layers = max_layer_index(idx, "visual.layer.");

    const auto& patch = need("visual.embed.patch");
    std::int64_t patch_cols = 1;
    for (std::size_t i = 1; i < patch.shape.size(); ++i) patch_cols *= patch.shape[i];
    cfg.image_width = static_cast<int>(patch.shape[0]);
    cfg.patch_size = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_cols) / 3.0)));
    const auto& proj = need("visual.proj");
    cfg.joint_dim = static_cast<int>(proj.shape.size() >= 2 ? proj.shape[1] : 1);

    // head counts: declared by the archive when available, else head width 64
    auto meta_int = [&](const std::string& key, int fallback) {
        auto it = idx.meta.find(key);
        if (it == idx.meta.end()) return fallback;
        return std::stoi(it->second);
    };
    cfg.text_heads = meta_int("text_heads", std::max(1, cfg.text_width / 64));
    cfg.image_heads = meta_int("image_heads", std::max(1, cfg.image_width / 64));

    const auto& pos = need("visual.embed.pos");
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(pos.shape[0] - 1))));
    cfg.image_h = cfg.image_w = meta_int("image_size", grid * cfg.patch_size);

    auto tap_it = idx.meta.find("tap_layers");
    if (tap_it != idx.meta.end()) {
        cfg.tap_layers = parse_int_list(tap_it->second);
    } else {
        // evenly spaced quarters, deduplicated for shallow encoders
        cfg.tap_layers.clear();
        for (int k = 1; k <= 4; ++k) {
            const int layer =
                std::max(1, static_cast<int>(std::lround(k * cfg.image_layers / 4.0)));
            if (cfg.tap_layers.empty() || cfg.tap_layers.back() != layer)
                cfg.tap_layers.push_back(layer);
        }
    }
    return cfg;
}

std::shared_ptr<Backbone> Backbone::load(const std::string& path, int desired_image_size,
                                         const std::vector<int>& tap_override) {
    ArchiveReader r = ArchiveReader::open(path);
    BackboneConfig cfg = infer_config(r.index());
    if (desired_image_size > 0) cfg.image_h = cfg.image_w = desired_image_size;
    if (!tap_override.empty()) cfg.tap_layers = tap_override;
    auto bb = std::shared_ptr<Backbone>(new Backbone(cfg));

    const int C = cfg.text_width;
    const int D = cfg.image_width;
    bb->tok_embed_ = r.matrix("text.embed.tok", cfg.vocab_size, C);
    bb->text_pos_ = r.matrix("text.embed.pos", cfg.context_length, C);
    for (int i = 0; i < cfg.text_layers; ++i) {
        auto& b = bb->text_blocks_[static_cast<std::size_t>(i)];
        const std::string p = "text.layer." + std::to_string(i + 1) + ".";
        MatrixXd aw = r.matrix(p + "attn.w", 4 * C, C);
        b.wq->val = aw.middleRows(0, C);
        b.wk->val = aw.middleRows(C, C);
        b.wv->val = aw.middleRows(2 * C, C);
        b.wo->val = aw.middleRows(3 * C, C);
        MatrixXd ab = r.matrix(p + "attn.b", 4 * C, 1);
        b.bq->val = ab.middleRows(0, C).transpose();
        b.bk->val = ab.middleRows(C, C).transpose();
        b.bv->val = ab.middleRows(2 * C, C).transpose();
        b.bo->val = ab.middleRows(3 * C, C).transpose();
        b.ln1w->val = r.matrix(p + "ln1.w", C, 1).transpose();
        b.ln1b->val = r.matrix(p + "ln1.b", C, 1).transpose();
        b.ln2w->val = r.matrix(p + "ln2.w", C, 1).transpose();
        b.ln2b->val = r.matrix(p + "ln2.b", C, 1).transpose();
        MatrixXd mw = r.matrix(p + "mlp.w", 8 * C, C);
        b.fc1->val = mw.middleRows(0, 4 * C);
        b.fc2->val = mw.middleRows(4 * C, 4 * C).transpose();
        MatrixXd mb = r.matrix(p + "mlp.b", 5 * C, 1);
        b.b1->val = mb.middleRows(0, 4 * C).transpose();
        b.b2->val = mb.middleRows(4 * C, C).transpose();
    }
    bb->text_lnf_w_->val = r.matrix("text.ln_final.w", C, 1).transpose();
    bb->text_lnf_b_->val = r.matrix("text.ln_final.b", C, 1).transpose();
    bb->text_proj_->val = r.matrix("text.proj", C, C);

    bb->vis_patch_ = r.matrix("visual.embed.patch", D, 3 * cfg.patch_size * cfg.patch_size);
    bb->vis_cls_ = r.matrix("visual.embed.cls", D, 1).transpose();
    MatrixXd pos = r.matrix("visual.embed.pos");
    if (pos.cols() != D) throw CheckpointError("visual.embed.pos", "width mismatch");
    const long hw = static_cast<long>(cfg.grid_h()) * cfg.grid_w();
    if (pos.rows() != 1 + hw) {
        const int src = static_cast<int>(std::lround(std::sqrt(static_cast<double>(pos.rows() - 1))));
        if (1 + static_cast<long>(src) * src != pos.rows())
            throw CheckpointError("visual.embed.pos", "non-square source grid");
        pos = interpolate_positional_grid(pos, src, src, cfg.grid_h(), cfg.grid_w());
    }
    bb->vis_pos_ = pos;
    bb->vis_lnpre_w_ = r.matrix("visual.ln_pre.w", D, 1).transpose();
    bb->vis_lnpre_b_ = r.matrix("visual.ln_pre.b", D, 1).transpose();
    for (int i = 0; i < cfg.image_layers; ++i) {
        auto& b = bb->vis_blocks_[static_cast<std::size_t>(i)];
        const std::string p = "visual.layer." + std::to_string(i + 1) + ".";
        MatrixXd aw = r.matrix(p + "attn.w", 4 * D, D);
        b.wq = aw.middleRows(0, D);
        b.wk = aw.middleRows(D, D);
        b.wv = aw.middleRows(2 * D, D);
        b.wo = aw.middleRows(3 * D, D);
        MatrixXd ab = r.matrix(p + "attn.b", 4 * D, 1);
        b.bq = ab.middleRows(0, D).transpose();
        b.bk = ab.middleRows(D, D).transpose();
        b.bv = ab.middleRows(2 * D, D).transpose();
        b.bo = ab.middleRows(3 * D, D).transpose();
        b.ln1w = r.matrix(p + "ln1.w", D, 1).transpose();
        b.ln1b = r.matrix(p + "ln1.b", D, 1).transpose();
        b.ln2w = r.matrix(p + "ln2.w", D, 1).transpose();
        b.ln2b = r.matrix(p + "ln2.b", D, 1).transpose();
        MatrixXd mw = r.matrix(p + "mlp.w", 8 * D, D);
        b.fc1 = mw.middleRows(0, 4 * D);
        b.fc2 = mw.middleRows(4 * D, 4 * D).transpose();
        MatrixXd mb = r.matrix(p + "mlp.b", 5 * D, 1);
        b.b1 = mb.middleRows(0, 4 * D).transpose();
        b.b2 = mb.middleRows(4 * D, D).transpose();
    }
    bb->vis_lnpost_w_ = r.matrix("visual.ln_post.w", D, 1).transpose();
    bb->vis_lnpost_b_ = r.matrix("visual.ln_post.b", D, 1).transpose();
    bb->vis_proj_ = r.matrix("visual.proj", D, cfg.joint_dim);
    return bb;
}

}  // namespace vcpseg
