#include "vcpseg/engine.hpp"

#include "vcpseg/archive.hpp"
#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

namespace vcpseg {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

std::uint64_t ModelState::params_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, var] : params) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(var->val.data(), sizeof(double) * static_cast<std::size_t>(var->val.size()), h);
    }
    return h;
}

namespace {

std::string tap_key(const RunOptions& opts, std::size_t k) {
    return opts.share_heads ? std::string("shared")
                            : "l" + std::to_string(opts.tap_layers[k]);
}

void register_params(ModelState& m) {
    m.params.clear();
    m.params["prompt.V"] = m.prompt.context;
    for (std::size_t i = 0; i < m.prompt.deep_bank.size(); ++i)
        if (m.prompt.deep_width > 0)
            m.params["prompt.P." + std::to_string(i)] = m.prompt.deep_bank[i];
    m.params["prompt.mininet.w"] = m.prompt.mini_w;
    m.params["prompt.mininet.b"] = m.prompt.mini_b;
    if (m.prompt.has_adapter()) {
        m.params["prompt.adapter.w"] = m.prompt.adapter_w;
        m.params["prompt.adapter.b"] = m.prompt.adapter_b;
    }
    const std::size_t sets = m.heads.shared ? 1 : m.heads.taps.size();
    for (std::size_t k = 0; k < sets; ++k) {
        const std::string key = "head." + tap_key(m.opts, k) + ".";
        m.params[key + "joint.w"] = m.heads.taps[k].joint_w;
        m.params[key + "joint.b"] = m.heads.taps[k].joint_b;
        m.params[key + "postvcp.wq"] = m.heads.taps[k].wq;
        m.params[key + "postvcp.wk"] = m.heads.taps[k].wk;
        m.params[key + "postvcp.wv"] = m.heads.taps[k].wv;
        m.params[key + "postvcp.wo"] = m.heads.taps[k].wo;
    }
    m.params["head.tau1"] = m.heads.log_tau1;
    m.params["head.tau2"] = m.heads.log_tau2;
}

}  // namespace

ModelState build_model(std::shared_ptr<const Backbone> backbone,
                       std::shared_ptr<const Tokenizer> tokenizer, const RunOptions& opts) {
    const BackboneConfig& bc = backbone->config();
    if (opts.image_size != bc.image_h)
        throw ConfigError("train.image_size disagrees with the backbone resolution");
    for (int t : opts.tap_layers)
        if (t < 1 || t > bc.image_layers)
            throw ConfigError("tap layer " + std::to_string(t) + " outside the image encoder");

    ModelState m;
    m.backbone = std::move(backbone);
    m.tokenizer = std::move(tokenizer);
    m.opts = opts;
    m.tpl.text = opts.template_text;
    m.tpl.normal_word = opts.normal_word;
    m.tpl.abnormal_word = opts.abnormal_word;
    m.tpl.category_width = opts.category_width;

    BackboneConfig cfg_for_heads = bc;
    cfg_for_heads.tap_layers = opts.tap_layers;

    Rng rng(opts.seed);
    m.prompt = init_prompt_params(bc, opts.category_width, opts.deep_width, opts.visual_adapter,
                                  rng);
    m.heads = init_head_params(cfg_for_heads, opts.attn_heads, opts.share_heads,
                               opts.attention_scaling, rng);

    const MatrixXd zero_cat = MatrixXd::Zero(opts.category_width, bc.text_width);
    m.normal_base = build_prompt_sequence(*m.backbone, *m.tokenizer, m.tpl, m.tpl.normal_word,
                                          zero_cat, opts.deep_width, opts.placement());
    m.abnormal_base = build_prompt_sequence(*m.backbone, *m.tokenizer, m.tpl, m.tpl.abnormal_word,
                                            zero_cat, opts.deep_width, opts.placement());
    register_params(m);
    return m;
}

MapsForward forward_maps(const ModelState& model, const VisualOutput& features) {
    const auto& opts = model.opts;
    const BackboneConfig& bc = model.backbone->config();
    if (features.patch_maps.size() != opts.tap_layers.size())
        throw ShapeMismatch("feature taps disagree with the configured tap layers");

    // Pre-VCP: map the global embedding into the category slot
    ad::Var global = ad::constant(features.global);
    ad::Var mapped = mini_net_forward_ad(model.prompt, global);
    ad::Var category = fuse_visual_context_ad(model.prompt.context, mapped);

    // deep-prompted text encoding for both states
    ad::Var seq_n = sequence_with_category_ad(model.normal_base, category);
    ad::Var seq_a = sequence_with_category_ad(model.abnormal_base, category);
    ad::Var g_n = encode_prompt_ad(*model.backbone, model.normal_base, seq_n,
                                   model.prompt.deep_bank);
    ad::Var g_a = encode_prompt_ad(*model.backbone, model.abnormal_base, seq_a,
                                   model.prompt.deep_bank);

    MapsForward out;
    out.f_t = ad::vconcat({g_n, g_a});

    ad::Var tau1 = temperature_ad(model.heads.log_tau1);
    ad::Var tau2 = temperature_ad(model.heads.log_tau2);
    const int H = features.grid_h, W = features.grid_w;
    const int h = bc.image_h, w = bc.image_w;

    for (std::size_t k = 0; k < features.patch_maps.size(); ++k) {
        const TapHeadParams& tap = model.heads.tap(static_cast<int>(k));
        ad::Var patch = ad::constant(features.patch_maps[k]);
        out.m1.push_back(baseline_map_ad(patch, tap, out.f_t, tau1, H, W, h, w));

        PostVcpResult pv =
            post_vcp_update_ad(patch, tap, out.f_t, model.heads.num_heads,
                               model.heads.attention_scaling);
        out.attention.push_back(std::move(pv.attention));
        ad::Var patch_normed = ad::row_l2_normalize(patch);
        out.m2.push_back(post_vcp_map_ad(patch_normed, pv.o_t, tau2, H, W, h, w));
        out.o_last = pv.o_t;
    }
    return out;
}

AnomalyResult infer_features(const ModelState& model, const VisualOutput& features,
                             double alpha_override) {
    MapsForward maps = forward_maps(model, features);
    AnomalyResult res;
    res.h = model.backbone->config().image_h;
    res.w = model.backbone->config().image_w;
    std::vector<MatrixXd> m1v, m2v;
    for (const auto& m : maps.m1) m1v.push_back(m->val);
    for (const auto& m : maps.m2) m2v.push_back(m->val);
    res.m1_layers = m1v;
    res.m2_layers = m2v;
    res.m1 = combine_layers(m1v);
    res.m2 = combine_layers(m2v);
    const double alpha = alpha_override >= 0.0 ? alpha_override : model.opts.alpha;
    res.fused = fuse(res.m1, res.m2, alpha);
    res.image_score = res.fused.maxCoeff();
    return res;
}

AnomalyResult infer(const ModelState& model, const ImageTensor& image) {
    return infer_features(model, model.backbone->encode_image(image, model.opts.tap_layers));
}

namespace {

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::map<std::string, MatrixXd> m, v;
    long t = 0;

    void step(std::map<std::string, ad::Var>& params, double lr_now, double weight_decay,
              double grad_clip) {
        ++t;
        double gnorm2 = 0.0;
        if (grad_clip > 0.0) {
            for (auto& [name, p] : params)
                if (p->has_grad()) gnorm2 += p->grad.squaredNorm();
        }
        const double clip_scale =
            (grad_clip > 0.0 && std::sqrt(gnorm2) > grad_clip) ? grad_clip / std::sqrt(gnorm2) : 1.0;

        for (auto& [name, p] : params) {
            MatrixXd g = p->has_grad() ? p->grad : MatrixXd::Zero(p->rows(), p->cols());
            g *= clip_scale;
            if (weight_decay > 0.0) g += weight_decay * p->val;
            auto& mm = m.try_emplace(name, MatrixXd::Zero(p->rows(), p->cols())).first->second;
            auto& vv = v.try_emplace(name, MatrixXd::Zero(p->rows(), p->cols())).first->second;
            mm = beta1 * mm + (1.0 - beta1) * g;
            vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
            MatrixXd mhat = mm / bc1;
            MatrixXd vhat = vv / bc2;
            p->val -= lr_now * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
        }
    }
};

std::map<std::string, MatrixXd> snapshot_params(const std::map<std::string, ad::Var>& params) {
    std::map<std::string, MatrixXd> s;
    for (const auto& [n, p] : params) s[n] = p->val;
    return s;
}

void write_param_archive(const std::map<std::string, MatrixXd>& params, const std::string& path) {
    ArchiveWriter w;
    for (const auto& [n, m] : params) w.add(n, m, "f64", false);
    w.write(path);
}

}  // namespace

TrainStats train(ModelState& model, const std::vector<Sample>& dataset, std::ostream* log,
                 const std::string& diverged_path) {
    if (dataset.empty()) throw DataError("training dataset is empty");
    const auto& opts = model.opts;
    const PreprocessSpec spec = preprocess_spec(opts);

    const std::uint64_t backbone_hash_before = model.backbone->content_hash();

    // The backbone is frozen, so per-image features are constant; by default
    // they are computed once up front. cache_features = false trades the
    // memory for a re-encode per visit.
    std::vector<ImageTensor> images;
    std::vector<VisualOutput> features;
    std::vector<VectorXd> masks;
    masks.reserve(dataset.size());
    for (const auto& s : dataset) {
        auto [img, mask] = load_sample(s, spec);
        if (opts.cache_features)
            features.push_back(model.backbone->encode_image(img, opts.tap_layers));
        else
            images.push_back(std::move(img));
        masks.push_back(std::move(mask));
    }
    auto sample_features = [&](std::size_t i) -> VisualOutput {
        if (opts.cache_features) return features[i];
        return model.backbone->encode_image(images[i], opts.tap_layers);
    };

    Adam adam;
    Rng shuffle_rng(opts.seed ^ 0x9e3779b97f4a7c15ull);

    const int batches_per_epoch =
        static_cast<int>((dataset.size() + opts.batch_size - 1) /
                         static_cast<std::size_t>(opts.batch_size));
    const long total_steps = static_cast<long>(opts.epochs) * batches_per_epoch;

    TrainStats stats;
    std::map<std::string, MatrixXd> last_good = snapshot_params(model.params);
    int step = 0;

    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        std::vector<std::size_t> order(dataset.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        double epoch_loss_sum = 0.0;
        int epoch_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(opts.batch_size));
            const double inv_batch = 1.0 / static_cast<double>(b1 - b0);

            for (auto& [name, p] : model.params) p->zero_grad();

            LossBreakdown batch_bd;
            double batch_loss = 0.0;
            for (std::size_t bi = b0; bi < b1; ++bi) {
                const std::size_t si = order[bi];
                MapsForward maps = forward_maps(model, sample_features(si));
                LossBreakdown bd;
                ad::Var loss = total_loss_ad(maps.m1, maps.m2, masks[si], opts.focal_gamma,
                                             opts.dice_smooth, &bd);
                ad::Var scaled = ad::scale(loss, inv_batch);
                batch_loss += loss->val(0, 0) * inv_batch;
                batch_bd.focal_m1 += bd.focal_m1 * inv_batch;
                batch_bd.dice_m1 += bd.dice_m1 * inv_batch;
                batch_bd.focal_m2 += bd.focal_m2 * inv_batch;
                batch_bd.dice_m2 += bd.dice_m2 * inv_batch;
                ad::backward(scaled);
            }

            if (!std::isfinite(batch_loss)) {
                // last_good holds the newest parameters with a verified
                // finite loss
                if (!diverged_path.empty()) write_param_archive(last_good, diverged_path);
                throw DivergedError("non-finite loss at step " + std::to_string(step + 1));
            }
            last_good = snapshot_params(model.params);

            double lr_now = opts.learning_rate;
            if (opts.lr_schedule == "cosine" && total_steps > 1)
                lr_now *= 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                                static_cast<double>(total_steps - 1)));
            adam.step(model.params, lr_now, opts.weight_decay, opts.grad_clip);
            ++step;
            epoch_loss_sum += batch_loss;
            ++epoch_batches;
            if (step == 1) stats.first_step_loss = batch_loss;

            if (log) {
                (*log) << "{\"step\":" << step << ",\"epoch\":" << epoch
                       << ",\"loss_focal_m1\":" << format_double(batch_bd.focal_m1)
                       << ",\"loss_dice_m1\":" << format_double(batch_bd.dice_m1)
                       << ",\"loss_focal_m2\":" << format_double(batch_bd.focal_m2)
                       << ",\"loss_dice_m2\":" << format_double(batch_bd.dice_m2)
                       << ",\"loss_total\":" << format_double(batch_loss) << "}\n";
            }
        }
        const double epoch_mean = epoch_loss_sum / std::max(1, epoch_batches);
        if (epoch == 1) stats.first_epoch_mean = epoch_mean;
        stats.last_epoch_mean = epoch_mean;
    }
    stats.steps = step;

    if (model.backbone->content_hash() != backbone_hash_before)
        throw Error("frozen backbone changed during training");
    return stats;
}

PreprocessSpec preprocess_spec(const RunOptions& opts) {
    PreprocessSpec spec;
    spec.target_h = spec.target_w = opts.image_size;
    return spec;
}

void save_checkpoint(const ModelState& model, const RunConfig& cfg,
                     const std::vector<std::string>& train_products, const std::string& path,
                     const std::string& metrics_json) {
    ArchiveWriter w;
    for (const auto& [name, p] : model.params) w.add(name, p->val, "f64", false);
    w.write(path);

    json meta;
    meta["format"] = 1;
    meta["config"] = config_to_json(cfg);
    meta["backbone"] = {{"kind", cfg.backbone_kind},
                        {"path", cfg.backbone_path},
                        {"seed", cfg.backbone_seed},
                        {"hash", hex64(model.backbone->content_hash())}};
    meta["seed"] = model.opts.seed;
    meta["train_products"] = train_products;
    if (!metrics_json.empty()) meta["metrics"] = json::parse(metrics_json);
    std::ofstream f(path + ".meta.json", std::ios::trunc);
    if (!f) throw CheckpointError(path + ".meta.json", "cannot write sidecar");
    f << meta.dump(2) << "\n";
}

Session make_session(const RunConfig& cfg) {
    Session s;
    s.cfg = cfg;

    PromptTemplate tpl;
    tpl.text = cfg.opts.template_text;
    tpl.normal_word = cfg.opts.normal_word;
    tpl.abnormal_word = cfg.opts.abnormal_word;
    tpl.category_width = cfg.opts.category_width;

    if (cfg.backbone_kind == "toy") {
        auto toy = std::make_shared<ToyTokenizer>(tpl.vocabulary_words());
        s.tokenizer = toy;
        BackboneConfig bc;
        bc.text_layers = cfg.toy_text_layers;
        bc.text_width = cfg.toy_text_width;
        bc.text_heads = cfg.toy_text_heads;
        bc.vocab_size = toy->vocab_size();
        bc.image_layers = cfg.toy_image_layers;
        bc.image_width = cfg.toy_image_width;
        bc.image_heads = cfg.toy_image_heads;
        bc.joint_dim = cfg.toy_joint_dim;
        bc.patch_size = cfg.toy_patch_size;
        bc.image_h = bc.image_w = cfg.opts.image_size;
        bc.tap_layers = cfg.opts.tap_layers;
        s.backbone = Backbone::random(bc, cfg.backbone_seed);
    } else {
        if (cfg.merges_path.empty())
            throw ConfigError("backbone.merges is required for the pretrained tokenizer");
        s.tokenizer = BpeTokenizer::from_merges_file(cfg.merges_path);
        s.backbone = Backbone::load(cfg.backbone_path, cfg.opts.image_size, cfg.opts.tap_layers);
    }
    s.model = build_model(s.backbone, s.tokenizer, cfg.opts);
    return s;
}

Session load_checkpoint(const std::string& path) {
    std::ifstream f(path + ".meta.json");
    if (!f) throw CheckpointError(path + ".meta.json", "missing sidecar");
    json meta;
    try {
        meta = json::parse(f);
    } catch (const std::exception& e) {
        throw CheckpointError(path + ".meta.json", std::string("bad sidecar: ") + e.what());
    }

    RunConfig cfg = parse_config_json(meta.at("config"));
    Session s = make_session(cfg);
    if (meta.contains("train_products"))
        s.train_products = meta.at("train_products").get<std::vector<std::string>>();

    const std::string want_hash = meta.at("backbone").value("hash", "");
    if (!want_hash.empty() && want_hash != hex64(s.backbone->content_hash()))
        std::cerr << "warning: backbone content hash " << hex64(s.backbone->content_hash())
                  << " differs from the checkpoint's " << want_hash << "\n";

    ArchiveReader r = ArchiveReader::open(path);
    for (auto& [name, p] : s.model.params) {
        MatrixXd m = r.matrix(name, p->rows(), p->cols());
        p->val = std::move(m);
    }
    return s;
}

EvalOutcome evaluate(const ModelState& model, const std::vector<Sample>& samples, double alpha,
                     bool scores_from_masks) {
    if (samples.empty()) throw DataError("no samples to evaluate");
    const PreprocessSpec spec = preprocess_spec(model.opts);

    int workers = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("VCPSEG_NUM_WORKERS")) {
        const int cap = std::atoi(env);
        if (cap > 0) workers = std::min(workers, cap);
    }
    workers = std::max(1, std::min<int>(workers, static_cast<int>(samples.size())));

    std::vector<metrics::ScoredSample> scored(samples.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= samples.size()) break;
                    auto [img, mask] = load_sample(samples[i], spec);
                    metrics::ScoredSample& out = scored[i];
                    out.product = samples[i].product;
                    out.h = img.h;
                    out.w = img.w;
                    out.mask.resize(static_cast<std::size_t>(mask.size()));
                    for (Eigen::Index k = 0; k < mask.size(); ++k)
                        out.mask[static_cast<std::size_t>(k)] =
                            mask(k) != 0.0 ? std::uint8_t(1) : std::uint8_t(0);
                    if (scores_from_masks) {
                        out.scores = mask;
                        out.image_score = mask.maxCoeff();
                    } else {
                        AnomalyResult res = infer_features(
                            model, model.backbone->encode_image(img, model.opts.tap_layers), alpha);
                        out.scores = res.fused;
                        out.image_score = res.image_score;
                    }
                }
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    // group per product, deterministic order
    std::map<std::string, std::vector<metrics::ScoredSample>> by_product;
    for (auto& s : scored) by_product[s.product].push_back(std::move(s));

    std::vector<metrics::ProductMetrics> rows;
    for (auto& [product, group] : by_product) {
        metrics::ProductMetrics pm;
        pm.product = product;
        try {
            pm.auroc = metrics::pixel_auroc(group);
            pm.pro = metrics::pro(group, model.opts.pro_fpr_limit, model.opts.pro_steps);
            pm.ap = metrics::pixel_ap(group);
            pm.has_pixel = true;
        } catch (const UndefinedMetric&) {
            pm.has_pixel = false;
        }
        try {
            auto [ia, iap] = metrics::image_metrics(group);
            pm.image_auroc = ia;
            pm.image_ap = iap;
            pm.has_image = true;
        } catch (const UndefinedMetric&) {
            pm.has_image = false;
        }
        rows.push_back(std::move(pm));
    }

    EvalOutcome out;
    out.report = metrics::build_report(rows);
    for (auto& [product, group] : by_product)
        for (auto& s : group) out.samples.push_back(std::move(s));
    return out;
}

}  // namespace vcpseg
