#include "vcpseg/backbone.hpp"
#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace vcpseg;
using Eigen::MatrixXd;

namespace {

BackboneConfig toy_config() {
    BackboneConfig cfg;
    cfg.text_layers = 4;
    cfg.text_width = 64;
    cfg.text_heads = 4;
    cfg.vocab_size = 16;
    cfg.image_layers = 4;
    cfg.image_width = 64;
    cfg.image_heads = 4;
    cfg.joint_dim = 64;
    cfg.patch_size = 16;
    cfg.image_h = cfg.image_w = 64;
    cfg.tap_layers = {2, 4};
    return cfg;
}

TokenSequence tokens(std::initializer_list<int> ids) {
    TokenSequence t;
    t.ids = ids;
    return t;
}

ImageTensor random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    ImageTensor img;
    img.h = h;
    img.w = w;
    img.px.resize(static_cast<long>(h) * w, 3);
    for (long i = 0; i < img.px.rows(); ++i)
        for (int c = 0; c < 3; ++c) img.px(i, c) = rng.gaussian();
    return img;
}

}  // namespace

TEST_CASE("config invariants are enforced") {
    BackboneConfig cfg = toy_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.context_length = 76;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.tap_layers = {2, 2};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.tap_layers = {5};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.image_h = 60;  // not divisible by 16
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("embed_tokens layout: eos index and zero pads") {
    auto bb = Backbone::random(toy_config(), 0);

    EmbeddingSequence seq = bb->embed_tokens(tokens({2, 3, 4, 5, 6, 7, 8}), 1);
    CHECK(seq.eos_index == 9);
    CHECK(seq.pad_start == 10);
    CHECK(seq.length() == 77);
    for (int i = seq.pad_start; i < 77; ++i) CHECK(seq.rows.row(i).norm() == 0.0);
    // the deep slot is zero-filled too
    CHECK(seq.rows.row(1).norm() == 0.0);

    EmbeddingSequence utp = bb->embed_tokens(tokens({2, 3, 4, 5, 6, 7, 8}), 0);
    CHECK(utp.eos_index == 8);

    TokenSequence long_seq;
    for (int i = 0; i < 75; ++i) long_seq.ids.push_back(2);
    CHECK_THROWS_AS(bb->embed_tokens(long_seq, 1), OverlongPrompt);
}

TEST_CASE("text_layer_forward is causal and deterministic") {
    auto bb = Backbone::random(toy_config(), 1);
    EmbeddingSequence seq = bb->embed_tokens(tokens({2, 3, 4, 5}), 1);
    Rng rng(5);
    for (int i = 0; i < 77; ++i)
        for (int j = 0; j < 64; ++j) seq.rows(i, j) += 0.1 * rng.gaussian();

    EmbeddingSequence out1 = bb->text_layer_forward(1, seq);
    EmbeddingSequence out2 = bb->text_layer_forward(1, seq);
    CHECK((out1.rows - out2.rows).cwiseAbs().maxCoeff() == 0.0);  // bitwise determinism

    // perturb a row beyond eos: rows <= eos unchanged
    EmbeddingSequence pert = seq;
    pert.rows.row(seq.eos_index + 1).array() += 3.0;
    EmbeddingSequence out3 = bb->text_layer_forward(1, pert);
    const double delta =
        (out3.rows.topRows(seq.eos_index + 1) - out1.rows.topRows(seq.eos_index + 1))
            .cwiseAbs()
            .maxCoeff();
    CHECK(delta < 1e-6);

    CHECK_THROWS_AS(bb->text_layer_forward(0, seq), InvalidLayer);
    CHECK_THROWS_AS(bb->text_layer_forward(5, seq), InvalidLayer);
}

TEST_CASE("zero-weight block with identity residual path is the identity") {
    auto bb = Backbone::random(toy_config(), 2);
    for (auto& [name, m] : bb->named_tensors())
        if (name.rfind("text.layer.1.", 0) == 0 && name.find(".ln") == std::string::npos)
            m->setZero();
    EmbeddingSequence seq = bb->embed_tokens(tokens({2, 3, 4}), 1);
    seq.rows.setRandom();
    EmbeddingSequence out = bb->text_layer_forward(1, seq);
    CHECK((out.rows - seq.rows).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("text_head equals the independently recomputed projection chain") {
    auto bb = Backbone::random(toy_config(), 3);
    EmbeddingSequence seq = bb->embed_tokens(tokens({2, 3, 4, 5}), 1);
    seq.rows.setRandom();

    const Eigen::RowVectorXd got = bb->text_head(seq);

    // hand chain: LayerNorm with the stored affine, then the projection
    Eigen::RowVectorXd row = seq.rows.row(seq.eos_index);
    const double mu = row.mean();
    Eigen::RowVectorXd d = row.array() - mu;
    const double var = d.squaredNorm() / d.size();
    Eigen::RowVectorXd normed = d / std::sqrt(var + bb->layer_norm_eps());
    auto tensors = bb->named_tensors();
    const MatrixXd *lnw = nullptr, *lnb = nullptr, *proj = nullptr;
    for (auto& [name, m] : tensors) {
        if (name == "text.ln_final.w") lnw = m;
        if (name == "text.ln_final.b") lnb = m;
        if (name == "text.proj") proj = m;
    }
    Eigen::RowVectorXd affine =
        (normed.array() * lnw->row(0).array()).matrix() + lnb->row(0);
    Eigen::RowVectorXd want = affine * (*proj);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("text_head with identity-configured norm and projection returns the eos row") {
    auto bb = Backbone::random(toy_config(), 4);
    for (auto& [name, m] : bb->named_tensors()) {
        if (name == "text.proj") m->setIdentity();
        if (name == "text.ln_final.w") m->setOnes();
        if (name == "text.ln_final.b") m->setZero();
    }
    EmbeddingSequence seq = bb->embed_tokens(tokens({2, 3}), 0);
    // craft an eos row with mean 0 and variance (1 - eps) so the epsilon-
    // guarded normalization is exactly the identity
    const int c = 64;
    Eigen::RowVectorXd row(c);
    for (int i = 0; i < c; ++i) row(i) = (i % 2 == 0) ? 1.0 : -1.0;
    row *= std::sqrt(1.0 - bb->layer_norm_eps());
    seq.rows.row(seq.eos_index) = row;
    const Eigen::RowVectorXd got = bb->text_head(seq);
    CHECK((got - row).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("text_head of a zero row with zero norm bias is zero") {
    auto bb = Backbone::random(toy_config(), 5);
    for (auto& [name, m] : bb->named_tensors())
        if (name == "text.ln_final.b") m->setZero();
    EmbeddingSequence seq = bb->embed_tokens(tokens({2}), 0);
    seq.rows.row(seq.eos_index).setZero();
    CHECK(bb->text_head(seq).norm() == 0.0);
}

TEST_CASE("encode_image produces the grid contract") {
    auto bb = Backbone::random(toy_config(), 6);
    VisualOutput out = bb->encode_image(random_image(64, 64, 7), {2, 4});
    CHECK(out.patch_maps.size() == 2);
    CHECK(out.grid_h == 4);
    CHECK(out.grid_w == 4);
    for (const auto& m : out.patch_maps) {
        CHECK(m.rows() == 16);
        CHECK(m.cols() == 64);
    }
    CHECK(out.global.size() == 64);

    CHECK_THROWS_AS(bb->encode_image(random_image(32, 64, 8), {2}), ShapeMismatch);
    CHECK_THROWS_AS(bb->encode_image(random_image(64, 64, 9), {5}), InvalidLayer);
}

TEST_CASE("a deep thin encoder yields one grid per configured tap") {
    BackboneConfig cfg;
    cfg.text_layers = 1;
    cfg.text_width = 8;
    cfg.text_heads = 2;
    cfg.vocab_size = 4;
    cfg.image_layers = 24;
    cfg.image_width = 8;
    cfg.image_heads = 2;
    cfg.joint_dim = 8;
    cfg.patch_size = 14;
    cfg.image_h = cfg.image_w = 28;
    cfg.tap_layers = {6, 12, 18, 24};
    auto bb = Backbone::random(cfg, 7);
    VisualOutput out = bb->encode_image(random_image(28, 28, 8), {6, 12, 18, 24});
    CHECK(out.patch_maps.size() == 4);
    CHECK(out.grid_h == 2);
    for (const auto& m : out.patch_maps) CHECK(m.rows() == 4);
}

TEST_CASE("init_random is deterministic; save/load round trips") {
    auto a = Backbone::random(toy_config(), 42);
    auto b = Backbone::random(toy_config(), 42);
    CHECK(a->content_hash() == b->content_hash());
    auto c = Backbone::random(toy_config(), 43);
    CHECK(a->content_hash() != c->content_hash());

    const std::string path =
        (std::filesystem::temp_directory_path() / "vcpseg_backbone_rt.vcp").string();
    a->save(path, "f64");
    auto loaded = Backbone::load(path);
    CHECK(loaded->content_hash() == a->content_hash());
    CHECK(loaded->config().text_layers == 4);
    CHECK(loaded->config().text_heads == 4);
    CHECK(loaded->config().tap_layers == std::vector<int>{2, 4});

    // forwards agree bitwise
    const ImageTensor img = random_image(64, 64, 10);
    const VisualOutput va = a->encode_image(img, {2, 4});
    const VisualOutput vb = loaded->encode_image(img, {2, 4});
    CHECK((va.global - vb.global).cwiseAbs().maxCoeff() == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("missing tensors in an archive are reported by name") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "vcpseg_backbone_miss.vcp").string();
    auto a = Backbone::random(toy_config(), 1);
    a->save(path, "f32");

    ArchiveReader r = ArchiveReader::open(path);
    ArchiveWriter w;
    for (const auto& [name, desc] : r.index().tensors)
        if (name != "text.layer.3.attn.w") w.add(name, r.matrix(name), "f32");
    for (const auto& [k, v] : r.index().meta) w.set_meta(k, v);
    w.write(path);

    try {
        Backbone::load(path);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        CHECK(e.tensor == "text.layer.3.attn.w");
    }
    std::remove(path.c_str());
}

TEST_CASE("config inference reads the published checkpoint geometry") {
    // header-level shapes of the ViT-L/14-336 release
    ArchiveIndex idx;
    auto put = [&](const std::string& name, std::vector<std::int64_t> shape) {
        TensorDesc d;
        d.dtype = "f32";
        d.shape = std::move(shape);
        idx.tensors[name] = d;
    };
    put("text.embed.tok", {49408, 768});
    put("text.embed.pos", {77, 768});
    for (int i = 1; i <= 12; ++i)
        put("text.layer." + std::to_string(i) + ".attn.w", {4 * 768, 768});
    put("visual.embed.patch", {1024, 3, 14, 14});
    put("visual.embed.pos", {1 + 24 * 24, 1024});
    for (int i = 1; i <= 24; ++i)
        put("visual.layer." + std::to_string(i) + ".attn.w", {4 * 1024, 1024});
    put("visual.proj", {1024, 768});

    const BackboneConfig cfg = Backbone::infer_config(idx);
    CHECK(cfg.text_layers == 12);
    CHECK(cfg.text_width == 768);
    CHECK(cfg.vocab_size == 49408);
    CHECK(cfg.image_width == 1024);
    CHECK(cfg.joint_dim == 768);
    CHECK(cfg.image_layers == 24);
    CHECK(cfg.patch_size == 14);
    CHECK(cfg.text_heads == 12);
    CHECK(cfg.image_heads == 16);
    CHECK(cfg.image_h == 336);
    CHECK(cfg.tap_layers == std::vector<int>{6, 12, 18, 24});
}

TEST_CASE("positional re-gridding keeps the class row and interpolates") {
    MatrixXd pos(1 + 4, 3);
    pos.setRandom();
    MatrixXd out = interpolate_positional_grid(pos, 2, 2, 4, 4);
    CHECK(out.rows() == 17);
    CHECK((out.row(0) - pos.row(0)).cwiseAbs().maxCoeff() == 0.0);
    // constant grids stay constant
    MatrixXd flat(1 + 4, 2);
    flat.setOnes();
    MatrixXd out2 = interpolate_positional_grid(flat, 2, 2, 3, 3);
    CHECK((out2.array() - 1.0).abs().maxCoeff() < 1e-12);
    // same-size re-gridding is the identity
    MatrixXd out3 = interpolate_positional_grid(pos, 2, 2, 2, 2);
    CHECK((out3 - pos).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("f32 backbone archives are byte-stable across save/load/save") {
    auto a = Backbone::random(toy_config(), 5);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string p1 = (dir / "vcpseg_bb_f32_a.vcp").string();
    const std::string p2 = (dir / "vcpseg_bb_f32_b.vcp").string();
    a->save(p1, "f32");
    Backbone::load(p1)->save(p2, "f32");
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1(std::istreambuf_iterator<char>(f1), {});
    const std::string b2(std::istreambuf_iterator<char>(f2), {});
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}
