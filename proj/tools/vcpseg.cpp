// Command-line entry points for training, evaluation, prediction, weight
// export, synthetic-corpus generation and backbone conversion.

#include "vcpseg/convert.hpp"
#include "vcpseg/engine.hpp"
#include "vcpseg/errors.hpp"
#include "vcpseg/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

vcpseg::RunConfig load_config(const std::string& path, long seed_override) {
    vcpseg::RunConfig cfg = vcpseg::parse_config_file(path);
    if (seed_override >= 0) cfg.opts.seed = static_cast<std::uint64_t>(seed_override);
    return cfg;
}

std::vector<std::string> product_list(const std::vector<vcpseg::Sample>& samples) {
    std::set<std::string> names;
    for (const auto& s : samples) names.insert(s.product);
    return {names.begin(), names.end()};
}

int cmd_train(const std::string& config_path, long seed_override) {
    vcpseg::RunConfig cfg = load_config(config_path, seed_override);
    if (cfg.train_root.empty())
        throw vcpseg::ConfigError("config key \"dataset.train_root\" is required for train");

    vcpseg::Session session = vcpseg::make_session(cfg);
    std::vector<vcpseg::Sample> dataset;
    for (auto& s : vcpseg::scan_dataset(cfg.train_root))
        if (s.split == "train") dataset.push_back(std::move(s));
    if (dataset.empty()) throw vcpseg::DataError("no training samples under " + cfg.train_root);

    fs::create_directories(cfg.out_dir);
    const std::string log_path = (fs::path(cfg.out_dir) / "train_log.jsonl").string();
    const std::string ckpt_path = (fs::path(cfg.out_dir) / "model.vcp").string();
    std::ofstream log(log_path, std::ios::trunc);

    vcpseg::TrainStats stats = vcpseg::train(
        session.model, dataset, &log,
        (fs::path(cfg.out_dir) / "model.lastgood.vcp").string());
    log.close();

    vcpseg::save_checkpoint(session.model, cfg, product_list(dataset), ckpt_path);
    std::cout << "trained " << stats.steps << " steps; first-step loss "
              << vcpseg::format_double(stats.first_step_loss) << ", last-epoch mean "
              << vcpseg::format_double(stats.last_epoch_mean) << "\n"
              << "checkpoint: " << ckpt_path << "\n"
              << "log: " << log_path << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& root_flag,
             const std::vector<double>& alphas, const std::string& out_flag,
             bool scores_from_masks) {
    vcpseg::Session session = vcpseg::load_checkpoint(ckpt);
    const std::string root = !root_flag.empty() ? root_flag : session.cfg.eval_root;
    if (root.empty())
        throw vcpseg::ConfigError("config key \"dataset.eval_root\" or --dataset-root is required");

    std::vector<vcpseg::Sample> samples;
    for (auto& s : vcpseg::scan_dataset(root))
        if (s.split == "test") samples.push_back(std::move(s));
    if (samples.empty()) throw vcpseg::DataError("no test samples under " + root);

    // zero-shot contract: the evaluated products must not overlap training
    std::vector<std::string> shared;
    {
        std::set<std::string> train_set(session.train_products.begin(),
                                        session.train_products.end());
        for (const auto& p : product_list(samples))
            if (train_set.count(p)) shared.push_back(p);
    }
    if (!shared.empty()) {
        std::cerr << "warning: products seen during training:";
        for (const auto& p : shared) std::cerr << " " << p;
        std::cerr << "\n";
    }

    const std::string out_dir = !out_flag.empty() ? out_flag : session.cfg.out_dir;
    fs::create_directories(out_dir);

    if (alphas.size() <= 1) {
        const double alpha = alphas.empty() ? session.model.opts.alpha : alphas[0];
        vcpseg::EvalOutcome outcome =
            vcpseg::evaluate(session.model, samples, alpha, scores_from_masks);
        std::cout << outcome.report.render_table();
        const std::string csv_path = (fs::path(out_dir) / "eval_report.csv").string();
        std::ofstream csv(csv_path, std::ios::trunc);
        csv << outcome.report.render_csv();
        std::cout << "csv: " << csv_path << "\n";
        return 0;
    }

    // alpha sweep: one mean row per value
    std::string csv = "alpha,auroc,pro,ap,image_auroc,image_ap\n";
    std::cout << "alpha    AUROC     PRO      AP   I-AUROC    I-AP\n";
    for (double alpha : alphas) {
        vcpseg::EvalOutcome outcome =
            vcpseg::evaluate(session.model, samples, alpha, scores_from_masks);
        const auto& m = outcome.report.mean;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%5.2f  %7.1f %7.1f %7.1f %9.1f %7.1f\n", alpha,
                      m.auroc * 100, m.pro * 100, m.ap * 100, m.image_auroc * 100,
                      m.image_ap * 100);
        std::cout << buf;
        std::snprintf(buf, sizeof(buf), "%.4f,%.1f,%.1f,%.1f,%.1f,%.1f\n", alpha, m.auroc * 100,
                      m.pro * 100, m.ap * 100, m.image_auroc * 100, m.image_ap * 100);
        csv += buf;
    }
    const std::string csv_path = (fs::path(out_dir) / "alpha_sweep.csv").string();
    std::ofstream f(csv_path, std::ios::trunc);
    f << csv;
    std::cout << "csv: " << csv_path << "\n";
    return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& image_path, const std::string& out_dir,
                const std::string& attn_dir) {
    vcpseg::Session session = vcpseg::load_checkpoint(ckpt);
    vcpseg::Sample sample;
    sample.image_path = image_path;
    auto [img, mask] = vcpseg::load_sample(sample, vcpseg::preprocess_spec(session.model.opts));
    (void)mask;

    const vcpseg::VisualOutput features =
        session.backbone->encode_image(img, session.model.opts.tap_layers);
    vcpseg::AnomalyResult res = vcpseg::infer_features(session.model, features);

    fs::create_directories(out_dir);
    const std::string stem = fs::path(image_path).stem().string();

    Eigen::MatrixXd grid(res.h, res.w);
    for (int y = 0; y < res.h; ++y)
        for (int x = 0; x < res.w; ++x) grid(y, x) = res.fused(static_cast<long>(y) * res.w + x);
    vcpseg::write_heatmap_png((fs::path(out_dir) / (stem + "_heat.png")).string(), grid);

    vcpseg::ArchiveWriter w;
    w.add_with_shape("map", grid, {res.h, res.w}, "f32");
    w.write((fs::path(out_dir) / (stem + "_map.vcp")).string());

    json meta;
    meta["image_score"] = res.image_score;
    meta["height"] = res.h;
    meta["width"] = res.w;
    std::ofstream f((fs::path(out_dir) / (stem + "_score.json")).string(), std::ios::trunc);
    f << meta.dump(2) << "\n";

    if (!attn_dir.empty()) {
        fs::create_directories(attn_dir);
        vcpseg::MapsForward maps = vcpseg::forward_maps(session.model, features);
        const int H = features.grid_h, W = features.grid_w;
        for (std::size_t k = 0; k < maps.attention.size(); ++k) {
            const auto& heads = maps.attention[k];
            // tile: 2 rows (normal / abnormal) x M head columns
            Eigen::MatrixXd tile(2 * H, static_cast<long>(heads.size()) * W);
            for (std::size_t m = 0; m < heads.size(); ++m)
                for (int rowcls = 0; rowcls < 2; ++rowcls)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x)
                            tile(rowcls * H + y, static_cast<long>(m) * W + x) =
                                heads[m](rowcls, y * W + x);
            const std::string name = stem + "_attn_l" +
                                     std::to_string(session.model.opts.tap_layers[k]) + ".png";
            vcpseg::write_gray_png((fs::path(attn_dir) / name).string(), tile);
        }
    }

    std::cout << "image_score " << vcpseg::format_double(res.image_score) << "\n";
    return 0;
}

int cmd_export_text_weights(const std::string& ckpt, const std::string& images_dir,
                            const std::string& out_csv) {
    vcpseg::Session session = vcpseg::load_checkpoint(ckpt);

    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(images_dir)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = e.path().extension().string();
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp")
            files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw vcpseg::DataError("no images found under " + images_dir);

    std::ofstream csv(out_csv, std::ios::trunc);
    if (!csv) throw vcpseg::DataError("cannot write " + out_csv);
    for (const auto& path : files) {
        vcpseg::Sample sample;
        sample.image_path = path;
        auto [img, mask] = vcpseg::load_sample(sample, vcpseg::preprocess_spec(session.model.opts));
        (void)mask;
        vcpseg::MapsForward maps = vcpseg::forward_maps(
            session.model, session.backbone->encode_image(img, session.model.opts.tap_layers));
        const Eigen::RowVectorXd g = vcpseg::classification_weights(maps.o_last->val);
        csv << path;
        for (Eigen::Index i = 0; i < g.size(); ++i)
            csv << "," << vcpseg::format_double(g(i));
        csv << "\n";
    }
    std::cout << "wrote " << files.size() << " rows to " << out_csv << "\n";
    return 0;
}

int cmd_synth(const std::string& config_path, const std::string& root_flag) {
    vcpseg::RunConfig cfg = vcpseg::parse_config_file(config_path);
    std::string root = !root_flag.empty() ? root_flag : cfg.train_root;
    if (root.empty())
        throw vcpseg::ConfigError("config key \"dataset.train_root\" or --root is required");
    const int n = vcpseg::synth_generate(cfg.synth, root);
    std::cout << "generated " << n << " images under " << root << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"zero-shot anomaly segmentation with visual-context prompting"};
    app.require_subcommand(1);

    std::string config_path, ckpt, dataset_root, image_path, out_dir, attn_dir, images_dir,
        out_csv, st_in, st_out, synth_root;
    long seed_override = -1;
    std::vector<double> alphas;
    bool scores_from_masks = false;

    auto* train = app.add_subcommand("train", "train prompt and head parameters");
    train->add_option("--config", config_path, "config file (JSON)")->required();
    train->add_option("--seed", seed_override, "override train.seed");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset root");
    eval->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
    eval->add_option("--dataset-root", dataset_root, "dataset root to evaluate");
    eval->add_option("--alpha", alphas, "fusion weight(s); several values sweep");
    eval->add_option("--out", out_dir, "output directory for the CSV");
    eval->add_flag("--scores-from-masks", scores_from_masks,
                   "test hook: use ground-truth masks as scores");

    auto* predict = app.add_subcommand("predict", "segment one image");
    predict->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
    predict->add_option("--image", image_path, "input image")->required();
    predict->add_option("--out", out_dir, "output directory")->required();
    predict->add_option("--attn-out", attn_dir, "also export attention-map grids here");

    auto* exportw = app.add_subcommand("export-text-weights",
                                       "write per-image classification weight vectors");
    exportw->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
    exportw->add_option("--images", images_dir, "directory of images")->required();
    exportw->add_option("--out", out_csv, "output CSV path")->required();

    auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
    synth->add_option("--config", config_path, "config file (JSON)")->required();
    synth->add_option("--root", synth_root, "output dataset root (defaults to train_root)");

    auto* convert = app.add_subcommand("convert-backbone",
                                       "convert a safetensors checkpoint to the archive format");
    convert->add_option("--input", st_in, "source .safetensors")->required();
    convert->add_option("--output", st_out, "destination archive")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train) return cmd_train(config_path, seed_override);
        if (*eval) return cmd_eval(ckpt, dataset_root, alphas, out_dir, scores_from_masks);
        if (*predict) return cmd_predict(ckpt, image_path, out_dir, attn_dir);
        if (*exportw) return cmd_export_text_weights(ckpt, images_dir, out_csv);
        if (*synth) return cmd_synth(config_path, synth_root);
        if (*convert) {
            const int n = vcpseg::convert_safetensors_backbone(st_in, st_out);
            std::cout << "converted " << n << " tensors into " << st_out << "\n";
            return 0;
        }
    } catch (const vcpseg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const vcpseg::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const vcpseg::DivergedError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 4;
    } catch (const vcpseg::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 5;
    } catch (const vcpseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
