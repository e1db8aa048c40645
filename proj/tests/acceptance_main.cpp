// Acceptance suite: one line per criterion, PASS/FAIL, nonzero exit on any
// failure. Criterion 10 (full-scale reproduction on the public checkpoint)
// needs external data and hardware and is reported as SKIP; the manual
// procedure is documented in the README.

#include "vcpseg/engine.hpp"
#include "vcpseg/errors.hpp"
#include "vcpseg/heads.hpp"
#include "vcpseg/loss.hpp"
#include "vcpseg/metrics.hpp"
#include "vcpseg/util.hpp"

#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

using namespace vcpseg;
namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

namespace {

int g_failures = 0;

void report(int index, const std::string& name, bool pass, const std::string& detail = "") {
    std::printf("[%s] %2d. %s%s%s\n", pass ? "PASS" : "FAIL", index, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double elapsed_s(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

MatrixXd gauss(Rng& rng, int r, int c, double s = 1.0) {
    MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = s * rng.gaussian();
    return m;
}

RunConfig toy_run_config() {
    RunConfig cfg;  // toy backbone: 4 layers, C = 64, patch 16, 64 x 64 input
    cfg.opts.image_size = 64;
    cfg.opts.tap_layers = {2, 4};
    cfg.opts.batch_size = 8;
    cfg.opts.attn_heads = 8;
    return cfg;
}

std::string make_synth(const std::string& tag, std::uint64_t seed, int count, int image_size) {
    const std::string root =
        (fs::temp_directory_path() / ("vcpseg_acc_" + tag + "_" + std::to_string(::getpid())))
            .string();
    fs::remove_all(root);
    SynthConfig sc;
    sc.seed = seed;
    sc.count = count;
    sc.test_count = 0;
    sc.image_size = image_size;
    synth_generate(sc, root);
    return root;
}

std::vector<Sample> train_split(const std::string& root) {
    std::vector<Sample> out;
    for (auto& s : scan_dataset(root))
        if (s.split == "train") out.push_back(std::move(s));
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

// ---------------------------------------------------------------------------

void criterion_1_simplex() {
    const auto t0 = std::chrono::steady_clock::now();
    const int H = 4, W = 4, d = 64, C = 64, out = 64;
    Rng rng(101);
    bool ok = true;
    double worst = 0.0;
    for (int trial = 0; trial < 1000 && ok; ++trial) {
        MatrixXd z = gauss(rng, H * W, d);
        MatrixXd ft = gauss(rng, 2, C);
        const double tau1 = rng.uniform(0.01, 1.0);
        const double tau2 = rng.uniform(0.01, 1.0);
        MatrixXd jw = gauss(rng, d, C, 0.2);
        RowVectorXd jb = gauss(rng, 1, C, 0.1).row(0);
        MatrixXd m1 = baseline_map(z, jw, jb, ft, tau1, H, W, out, out);

        MatrixXd wq = gauss(rng, C, C, 0.2), wk = gauss(rng, d, C, 0.2),
                 wv = gauss(rng, d, C, 0.2), wo = gauss(rng, C, d, 0.2);
        PostVcpPlain pv = post_vcp_update(z, wq, wk, wv, wo, ft, 8);
        MatrixXd m2 = post_vcp_map(z, pv.o_t, tau2, H, W, out, out);

        for (const MatrixXd* m : {&m1, &m2}) {
            for (int i = 0; i < m->rows(); ++i) {
                const double sum_err = std::abs(m->row(i).sum() - 1.0);
                worst = std::max(worst, sum_err);
                if (sum_err > 1e-5 || (*m)(i, 0) < 0.0 || (*m)(i, 0) > 1.0 || (*m)(i, 1) < 0.0 ||
                    (*m)(i, 1) > 1.0) {
                    ok = false;
                    break;
                }
            }
            if (!ok) break;
        }
    }
    const double dt = elapsed_s(t0);
    ok = ok && dt < 30.0;
    char detail[128];
    std::snprintf(detail, sizeof(detail), "1000 draws, worst channel-sum error %.2e, %.1fs",
                  worst, dt);
    report(1, "simplex invariant on both branch maps", ok, detail);
}

void criterion_2_causality() {
    BackboneConfig bc;
    bc.text_layers = 4;
    bc.text_width = 64;
    bc.text_heads = 4;
    bc.vocab_size = 32;
    bc.image_layers = 4;
    bc.image_width = 64;
    bc.image_heads = 4;
    bc.joint_dim = 64;
    bc.patch_size = 16;
    bc.image_h = bc.image_w = 64;
    bc.tap_layers = {2, 4};
    auto bb = Backbone::random(bc, 202);

    Rng rng(203);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n_tokens = static_cast<int>(rng.uniform_int(1, 40));
        TokenSequence toks;
        for (int i = 0; i < n_tokens; ++i)
            toks.ids.push_back(static_cast<int>(rng.uniform_int(2, 31)));
        EmbeddingSequence seq = bb->embed_tokens(toks, 1);
        for (int i = 0; i <= seq.eos_index; ++i)
            for (int j = 0; j < 64; ++j) seq.rows(i, j) += 0.05 * rng.gaussian();

        auto run = [&](const EmbeddingSequence& s) {
            EmbeddingSequence cur = s;
            cur.rows += bb->text_positional();
            for (int l = 1; l <= 4; ++l) cur = bb->text_layer_forward(l, cur);
            return bb->text_head(cur);
        };
        const RowVectorXd base = run(seq);

        EmbeddingSequence pert = seq;
        for (int i = seq.eos_index + 1; i < 77; ++i)
            for (int j = 0; j < 64; ++j) pert.rows(i, j) += rng.gaussian();
        const RowVectorXd moved = run(pert);
        worst = std::max(worst, (base - moved).cwiseAbs().maxCoeff());
    }
    char detail[96];
    std::snprintf(detail, sizeof(detail), "100 trials, worst |dg| = %.2e", worst);
    report(2, "post-EOS perturbations never reach the text head", worst < 1e-6, detail);
}

void criterion_3_reductions() {
    bool ok = true;
    std::string why;

    // (a) alpha = 0: fused map is the baseline abnormal channel bitwise
    {
        RunConfig cfg = toy_run_config();
        Session s = make_session(cfg);
        Rng rng(301);
        ImageTensor img;
        img.h = img.w = 64;
        img.px = gauss(rng, 64 * 64, 3);
        VisualOutput vo = s.backbone->encode_image(img, cfg.opts.tap_layers);
        AnomalyResult res = infer_features(s.model, vo, 0.0);
        if ((res.fused - res.m1.col(1)).cwiseAbs().maxCoeff() != 0.0) {
            ok = false;
            why = "alpha=0 fusion differs from M1";
        }
    }

    // (b) n = 0: encode_prompts equals the plain UTP loop bitwise
    if (ok) {
        RunConfig cfg = toy_run_config();
        cfg.opts.deep_width = 0;
        Session s = make_session(cfg);
        MatrixXd cat = s.model.prompt.context->val;
        PromptPair pair = build_prompt_pair(*s.backbone, *s.tokenizer, s.model.tpl, cat, 0,
                                            DtpPlacement::kPre);
        MatrixXd ft = encode_prompts(*s.backbone, pair, {});
        auto plain = [&](const EmbeddingSequence& seq) {
            EmbeddingSequence cur = seq;
            cur.rows += s.backbone->text_positional();
            for (int l = 1; l <= s.backbone->config().text_layers; ++l)
                cur = s.backbone->text_layer_forward(l, cur);
            return s.backbone->text_head(cur);
        };
        if ((ft.row(0) - plain(pair.normal)).cwiseAbs().maxCoeff() != 0.0 ||
            (ft.row(1) - plain(pair.abnormal)).cwiseAbs().maxCoeff() != 0.0) {
            ok = false;
            why = "n=0 deep prompting differs from plain encoding";
        }
    }

    // (c) zero mini-net: F_t identical across images bitwise
    if (ok) {
        RunConfig cfg = toy_run_config();
        Session s = make_session(cfg);
        s.model.prompt.mini_w->val.setZero();
        s.model.prompt.mini_b->val.setZero();
        Rng rng(302);
        ImageTensor a, b;
        a.h = a.w = b.h = b.w = 64;
        a.px = gauss(rng, 64 * 64, 3);
        b.px = gauss(rng, 64 * 64, 3);
        MapsForward fa = forward_maps(s.model, s.backbone->encode_image(a, cfg.opts.tap_layers));
        MapsForward fb = forward_maps(s.model, s.backbone->encode_image(b, cfg.opts.tap_layers));
        if ((fa.f_t->val - fb.f_t->val).cwiseAbs().maxCoeff() != 0.0) {
            ok = false;
            why = "zero mini-net F_t still image-dependent";
        }
    }
    report(3, "reduction identities (alpha=0, n=0, zero mini-net) hold bitwise", ok, why);
}

void criterion_4_permutation() {
    Rng rng(401);
    const int H = 4, W = 4, HW = H * W, d = 64, C = 64;
    double worst_o = 0.0;
    bool logits_exact = true;
    for (int trial = 0; trial < 100; ++trial) {
        TapHeadParams tap;
        tap.joint_w = ad::leaf(gauss(rng, d, C, 0.2));
        tap.joint_b = ad::leaf(gauss(rng, 1, C, 0.1));
        tap.wq = ad::leaf(gauss(rng, C, C, 0.2));
        tap.wk = ad::leaf(gauss(rng, d, C, 0.2));
        tap.wv = ad::leaf(gauss(rng, d, C, 0.2));
        tap.wo = ad::leaf(gauss(rng, C, d, 0.2));
        MatrixXd z = gauss(rng, HW, d);
        MatrixXd ft = gauss(rng, 2, C);

        std::vector<int> perm(HW);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        MatrixXd zp(HW, d);
        for (int i = 0; i < HW; ++i) zp.row(i) = z.row(perm[static_cast<std::size_t>(i)]);

        // O_t invariance
        PostVcpResult a = post_vcp_update_ad(ad::constant(z), tap, ad::constant(ft), 8, false);
        PostVcpResult b = post_vcp_update_ad(ad::constant(zp), tap, ad::constant(ft), 8, false);
        worst_o = std::max(worst_o, (a.o_t->val - b.o_t->val).cwiseAbs().maxCoeff());

        // pre-upsample logits permute exactly on both branches
        MatrixXd l1 = baseline_logits_ad(ad::constant(z), tap, ad::constant(ft))->val;
        MatrixXd l1p = baseline_logits_ad(ad::constant(zp), tap, ad::constant(ft))->val;
        MatrixXd l2 =
            post_vcp_logits_ad(ad::row_l2_normalize(ad::constant(z)), a.o_t)->val;
        MatrixXd l2p =
            post_vcp_logits_ad(ad::row_l2_normalize(ad::constant(zp)), a.o_t)->val;
        for (int i = 0; i < HW; ++i) {
            const int src = perm[static_cast<std::size_t>(i)];
            if ((l1p.row(i) - l1.row(src)).cwiseAbs().maxCoeff() != 0.0) logits_exact = false;
            if ((l2p.row(i) - l2.row(src)).cwiseAbs().maxCoeff() != 0.0) logits_exact = false;
        }
    }
    char detail[96];
    std::snprintf(detail, sizeof(detail), "worst |dO_t| = %.2e, logits %s", worst_o,
                  logits_exact ? "exact" : "NOT exact");
    report(4, "patch permutations: O_t stable, pre-upsample logits permute exactly",
           worst_o < 1e-6 && logits_exact, detail);
}

void criterion_5_gradcheck() {
    const auto t0 = std::chrono::steady_clock::now();

    RunConfig cfg;  // 4 x 4 patch grid toy instance
    cfg.toy_text_layers = 2;
    cfg.toy_text_width = 32;
    cfg.toy_text_heads = 4;
    cfg.toy_image_layers = 2;
    cfg.toy_image_width = 32;
    cfg.toy_image_heads = 4;
    cfg.toy_joint_dim = 32;
    cfg.toy_patch_size = 16;
    cfg.opts.image_size = 64;
    cfg.opts.tap_layers = {1, 2};
    cfg.opts.attn_heads = 4;
    Session s = make_session(cfg);

    Rng rng(501);
    ImageTensor img;
    img.h = img.w = 64;
    img.px = gauss(rng, 64 * 64, 3);
    const VisualOutput vo = s.backbone->encode_image(img, cfg.opts.tap_layers);
    VectorXd mask = VectorXd::Zero(64 * 64);
    for (int i = 0; i < 64 * 64; ++i) mask(i) = rng.uniform() < 0.2 ? 1.0 : 0.0;

    auto loss_value = [&]() {
        MapsForward maps = forward_maps(s.model, vo);
        return total_loss_ad(maps.m1, maps.m2, mask, cfg.opts.focal_gamma, cfg.opts.dice_smooth);
    };

    for (auto& [name, p] : s.model.params) p->zero_grad();
    ad::backward(loss_value());

    bool ok = true;
    double worst_rel = 0.0;
    std::string worst_name;
    const double eps = 1e-6;
    for (auto& [name, p] : s.model.params) {
        MatrixXd analytic = p->has_grad() ? p->grad : MatrixXd::Zero(p->rows(), p->cols());
        // sample a handful of coordinates per tensor
        const int samples = std::min<int>(6, static_cast<int>(p->val.size()));
        Rng pick(fnv1a(name.data(), name.size()));
        for (int k = 0; k < samples; ++k) {
            const int i = static_cast<int>(pick.uniform_int(0, p->rows() - 1));
            const int j = static_cast<int>(pick.uniform_int(0, p->cols() - 1));
            const double keep = p->val(i, j);
            p->val(i, j) = keep + eps;
            const double up = loss_value()->val(0, 0);
            p->val(i, j) = keep - eps;
            const double dn = loss_value()->val(0, 0);
            p->val(i, j) = keep;
            const double numeric = (up - dn) / (2 * eps);
            const double denom = std::max({1e-4, std::abs(numeric), std::abs(analytic(i, j))});
            const double rel = std::abs(numeric - analytic(i, j)) / denom;
            if (rel > worst_rel) {
                worst_rel = rel;
                worst_name = name;
            }
            if (rel > 1e-3) ok = false;
        }
    }
    const double dt = elapsed_s(t0);
    ok = ok && dt < 120.0;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "%zu tensors, worst rel err %.2e (%s), %.1fs",
                  s.model.params.size(), worst_rel, worst_name.c_str(), dt);
    report(5, "analytic gradients match central differences for every trainable tensor", ok,
           detail);
}

void criterion_6_metric_oracles() {
    Rng rng(601);
    bool ok = true;
    double worst_roc = 0.0, worst_ap = 0.0, worst_pro = 0.0;
    for (int trial = 0; trial < 500 && ok; ++trial) {
        const int h = static_cast<int>(rng.uniform_int(2, 32));
        const int w = static_cast<int>(rng.uniform_int(2, 32));
        std::vector<double> scores(static_cast<std::size_t>(h) * w);
        std::vector<std::uint8_t> mask(scores.size());
        bool pos = false, neg = false;
        const bool quantize = trial % 3 == 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            scores[i] = quantize ? std::round(rng.uniform() * 12.0) / 12.0 : rng.uniform();
            mask[i] = rng.uniform() < 0.3 ? 1 : 0;
            pos |= mask[i] == 1;
            neg |= mask[i] == 0;
        }
        if (!pos) mask[0] = 1;
        if (!neg) mask[1] = 0;

        worst_roc = std::max(worst_roc, std::abs(metrics::auroc(scores, mask) -
                                                 oracle::auroc(scores, mask)));
        worst_ap = std::max(worst_ap, std::abs(metrics::average_precision(scores, mask) -
                                               oracle::average_precision(scores, mask)));

        metrics::ScoredSample sample;
        sample.scores =
            Eigen::Map<const VectorXd>(scores.data(), static_cast<long>(scores.size()));
        sample.mask = mask;
        sample.h = h;
        sample.w = w;
        sample.image_score = 0.0;
        const double got = metrics::pro({sample}, 0.3, 200);
        const double expect = oracle::pro({{scores, mask, h, w}}, 0.3);
        worst_pro = std::max(worst_pro, std::abs(got - expect));

        ok = worst_roc < 1e-9 && worst_ap < 1e-9 && worst_pro < 1e-6;
    }

    // analytic spot values hold exactly
    std::vector<std::uint8_t> m{0, 1, 1, 0, 1, 0};
    std::vector<double> perfect(m.begin(), m.end());
    if (metrics::auroc(perfect, m) != 1.0) ok = false;
    std::vector<double> flat(m.size(), 0.3);
    if (metrics::average_precision(flat, m) != 0.5) ok = false;

    char detail[128];
    std::snprintf(detail, sizeof(detail),
                  "500 instances; worst dAUROC %.1e, dAP %.1e, dPRO %.1e", worst_roc, worst_ap,
                  worst_pro);
    report(6, "AUROC/AP/PRO match brute-force oracles", ok, detail);
}

void criterion_7_overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg = toy_run_config();
    cfg.opts.epochs = 200;       // batch = full 8-image set -> 200 Adam steps
    cfg.opts.learning_rate = 4e-5;
    const std::string root = make_synth("overfit", 1, 8, 64);

    Session s = make_session(cfg);
    std::vector<Sample> train_set = train_split(root);
    TrainStats stats = train(s.model, train_set, nullptr);
    EvalOutcome out = evaluate(s.model, train_set, cfg.opts.alpha, false);
    const double auroc = out.report.rows[0].auroc;
    const double dt = elapsed_s(t0);

    const bool ok = stats.steps == 200 && auroc >= 0.95 &&
                    stats.last_epoch_mean < stats.first_step_loss && dt < 300.0;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "200 steps @ lr 4e-5: train AUROC %.3f, loss %.3f -> %.3f, %.0fs", auroc,
                  stats.first_step_loss, stats.last_epoch_mean, dt);
    report(7, "toy overfit reaches pixel-AUROC >= 0.95 with decreasing loss", ok, detail);
    fs::remove_all(root);
}

void criterion_8_determinism() {
    RunConfig cfg = toy_run_config();
    cfg.opts.epochs = 20;
    cfg.opts.learning_rate = 4e-5;
    cfg.opts.seed = 7;
    const std::string root = make_synth("determinism", 2, 8, 64);
    std::vector<Sample> train_set = train_split(root);

    auto run_once = [&](const std::string& tag) {
        Session s = make_session(cfg);
        std::ostringstream log;
        train(s.model, train_set, &log);
        const std::string ckpt =
            (fs::temp_directory_path() / ("vcpseg_acc_det_" + tag + ".vcp")).string();
        save_checkpoint(s.model, cfg, {"widget"}, ckpt);
        return std::make_pair(read_file(ckpt), log.str());
    };
    auto [bytes_a, log_a] = run_once("a");
    auto [bytes_b, log_b] = run_once("b");
    const bool ok = !bytes_a.empty() && bytes_a == bytes_b && log_a == log_b;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "checkpoint %zu bytes, logs %zu bytes", bytes_a.size(),
                  log_a.size());
    report(8, "same seed gives byte-identical checkpoints and logs", ok, detail);
    fs::remove_all(root);
}

void criterion_9_shapes() {
    // thin encoder at the published geometry: 518 x 518 input, patch 14
    BackboneConfig bc;
    bc.text_layers = 2;
    bc.text_width = 32;
    bc.text_heads = 4;
    bc.vocab_size = 16;
    bc.image_layers = 2;
    bc.image_width = 32;
    bc.image_heads = 4;
    bc.joint_dim = 32;
    bc.patch_size = 14;
    bc.image_h = bc.image_w = 518;
    bc.tap_layers = {1, 2};
    auto bb = Backbone::random(bc, 901);

    Rng rng(902);
    ImageTensor img;
    img.h = img.w = 518;
    img.px = gauss(rng, 518 * 518, 3);
    const VisualOutput vo = bb->encode_image(img, {1, 2});
    bool ok = vo.grid_h == 37 && vo.grid_w == 37 && vo.patch_maps.size() == 2 &&
              vo.patch_maps[0].rows() == 37 * 37;

    MatrixXd jw = gauss(rng, 32, 32, 0.2);
    RowVectorXd jb = RowVectorXd::Zero(32);
    MatrixXd ft = gauss(rng, 2, 32);
    MatrixXd map = baseline_map(vo.patch_maps[0], jw, jb, ft, 0.07, 37, 37, 518, 518);
    ok = ok && map.rows() == 518 * 518 && map.cols() == 2;

    char detail[96];
    std::snprintf(detail, sizeof(detail), "grid %dx%d, map %ld x %ld", vo.grid_h, vo.grid_w,
                  static_cast<long>(map.rows()), static_cast<long>(map.cols()));
    report(9, "518x518 input with patch 14 gives 37x37 grids and 518x518 maps", ok, detail);
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    criterion_1_simplex();
    criterion_2_causality();
    criterion_3_reductions();
    criterion_4_permutation();
    criterion_5_gradcheck();
    criterion_6_metric_oracles();
    criterion_7_overfit();
    criterion_8_determinism();
    criterion_9_shapes();
    std::printf(
        "[SKIP] 10. full-scale spot check against the published numbers "
        "(needs the public ViT-L-14-336 checkpoint, MVTec-AD/VisA and hours of GPU/CPU time; "
        "see README for the manual procedure)\n");
    if (g_failures) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all runnable criteria passed\n");
    return 0;
}
