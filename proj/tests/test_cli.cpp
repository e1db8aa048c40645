// End-to-end tests of the command-line surface: exit codes, artifacts and
// reproducibility. The binary path comes from the build system.

#include "vcpseg/archive.hpp"

#include <json.hpp>

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef VCPSEG_CLI_BIN
#error "VCPSEG_CLI_BIN must point at the CLI binary"
#endif

namespace {

struct CliResult {
    int exit_code;
    std::string out;
    std::string err;
};

CliResult run_cli(const std::string& args) {
    const fs::path tmp = fs::temp_directory_path();
    const std::string out_f = (tmp / "vcpseg_cli_out.txt").string();
    const std::string err_f = (tmp / "vcpseg_cli_err.txt").string();
    const std::string cmd =
        std::string(VCPSEG_CLI_BIN) + " " + args + " > " + out_f + " 2> " + err_f;
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream fo(out_f), fe(err_f);
    r.out.assign(std::istreambuf_iterator<char>(fo), {});
    r.err.assign(std::istreambuf_iterator<char>(fe), {});
    return r;
}

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() / ("vcpseg_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }

    std::string write_config(int epochs = 4, int count = 6) {
        json cfg;
        cfg["backbone"] = {{"kind", "toy"},
                           {"seed", 0},
                           {"toy",
                            {{"text_layers", 2},
                             {"text_width", 32},
                             {"text_heads", 4},
                             {"image_layers", 2},
                             {"image_width", 32},
                             {"image_heads", 4},
                             {"joint_dim", 32},
                             {"patch_size", 16}}}};
        cfg["dataset"] = {{"train_root", (dir / "data").string()},
                          {"eval_root", (dir / "data").string()}};
        cfg["train"] = {{"learning_rate", 1e-3}, {"epochs", epochs},  {"batch_size", 4},
                        {"seed", 3},             {"alpha", 0.75},     {"r", 2},
                        {"n", 1},                {"heads", 4},        {"tap_layers", {1, 2}},
                        {"image_size", 32},      {"template", "a photo of a [state]"},
                        {"state_pair", {"good", "damaged"}}};
        cfg["synth"] = {{"seed", 11}, {"count", count}, {"image_size", 32}};
        cfg["out_dir"] = (dir / "out").string();
        const std::string path = (dir / "config.json").string();
        std::ofstream f(path);
        f << cfg.dump(2);
        return path;
    }
};

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("help exits 0; bad flags and subcommands exit 2") {
    CHECK(run_cli("--help").exit_code == 0);
    CHECK(run_cli("train --help").exit_code == 0);
    CHECK(run_cli("--no-such-flag").exit_code == 2);
    CHECK(run_cli("no-such-subcommand").exit_code == 2);
    CHECK(run_cli("train").exit_code == 2);  // missing required --config
}

TEST_CASE("config errors carry the offending key and exit 2") {
    Workspace ws;
    // missing dataset.train_root
    {
        json cfg;
        cfg["train"] = {{"image_size", 32}, {"tap_layers", {1, 2}}};
        std::ofstream f(ws.dir / "c1.json");
        f << cfg.dump();
        f.close();
        CliResult r = run_cli("train --config " + (ws.dir / "c1.json").string());
        CHECK(r.exit_code == 2);
        CHECK(r.err.find("dataset.train_root") != std::string::npos);
    }
    // unknown key is rejected by name
    {
        std::ofstream f(ws.dir / "c2.json");
        f << R"({"training": {"epochs": 3}})";
        f.close();
        CliResult r = run_cli("train --config " + (ws.dir / "c2.json").string());
        CHECK(r.exit_code == 2);
        CHECK(r.err.find("training") != std::string::npos);
    }
    // unparseable JSON
    {
        std::ofstream f(ws.dir / "c3.json");
        f << "{not json";
        f.close();
        CHECK(run_cli("train --config " + (ws.dir / "c3.json").string()).exit_code == 2);
    }
}

TEST_CASE("synth + train + eval + predict + export round trip") {
    Workspace ws;
    const std::string cfg = ws.write_config();

    // synth writes the corpus into the dataset root
    CliResult synth = run_cli("synth --config " + cfg);
    CHECK(synth.exit_code == 0);
    CHECK(fs::exists(ws.dir / "data/widget/train/good/000.png"));
    CHECK(fs::exists(ws.dir / "data/widget/ground_truth/defect/001_mask.png"));

    // train writes checkpoint + sidecar + log
    CliResult train = run_cli("train --config " + cfg);
    CHECK(train.exit_code == 0);
    const fs::path ckpt = ws.dir / "out/model.vcp";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(ws.dir / "out/model.vcp.meta.json"));
    CHECK(fs::exists(ws.dir / "out/train_log.jsonl"));

    // the sidecar records the backbone identity and the products
    {
        std::ifstream f(ws.dir / "out/model.vcp.meta.json");
        json meta = json::parse(f);
        CHECK(meta["train_products"] == json::array({"widget"}));
        CHECK(meta["backbone"]["kind"] == "toy");
        CHECK(meta.contains("config"));
    }

    // eval on the same products warns about the zero-shot overlap
    CliResult eval = run_cli("eval --checkpoint " + ckpt.string() + " --dataset-root " +
                             (ws.dir / "data").string());
    CHECK(eval.exit_code == 0);
    CHECK(eval.err.find("widget") != std::string::npos);  // overlap warning
    CHECK(eval.out.find("widget") != std::string::npos);
    CHECK(fs::exists(ws.dir / "out/eval_report.csv"));

    // the mask oracle hook gives a perfect row
    CliResult oracle = run_cli("eval --checkpoint " + ckpt.string() + " --dataset-root " +
                               (ws.dir / "data").string() + " --scores-from-masks");
    CHECK(oracle.exit_code == 0);
    CHECK(oracle.out.find("100.0") != std::string::npos);

    // alpha sweep prints one row per value
    CliResult sweep = run_cli("eval --checkpoint " + ckpt.string() + " --dataset-root " +
                              (ws.dir / "data").string() + " --alpha 0 --alpha 0.5 --alpha 1");
    CHECK(sweep.exit_code == 0);
    CHECK(fs::exists(ws.dir / "out/alpha_sweep.csv"));
    {
        std::ifstream f(ws.dir / "out/alpha_sweep.csv");
        std::string line;
        int rows = 0;
        while (std::getline(f, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 4);  // header + 3 alphas
    }

    // predict writes heatmap + raw map + score json, score == max(raw map)
    const std::string image = (ws.dir / "data/widget/test/defect/007.png").string();
    CliResult predict = run_cli("predict --checkpoint " + ckpt.string() + " --image " + image +
                                " --out " + (ws.dir / "pred").string() + " --attn-out " +
                                (ws.dir / "pred/attn").string());
    CHECK(predict.exit_code == 0);
    CHECK(fs::exists(ws.dir / "pred/007_heat.png"));
    REQUIRE(fs::exists(ws.dir / "pred/007_map.vcp"));
    REQUIRE(fs::exists(ws.dir / "pred/007_score.json"));
    CHECK(fs::exists(ws.dir / "pred/attn/007_attn_l1.png"));
    {
        vcpseg::ArchiveReader r =
            vcpseg::ArchiveReader::open((ws.dir / "pred/007_map.vcp").string());
        Eigen::MatrixXd map = r.matrix("map");
        CHECK(map.rows() == 32);
        CHECK(map.cols() == 32);
        std::ifstream f(ws.dir / "pred/007_score.json");
        json score = json::parse(f);
        // the raw map is serialized f32, so compare at float precision
        CHECK(std::abs(score["image_score"].get<double>() - map.maxCoeff()) < 1e-6);
    }

    // export-text-weights: deterministic rows of d_I + 1 columns
    CliResult exp = run_cli("export-text-weights --checkpoint " + ckpt.string() + " --images " +
                            (ws.dir / "data/widget/test/good").string() + " --out " +
                            (ws.dir / "weights.csv").string());
    CHECK(exp.exit_code == 0);
    {
        std::ifstream f(ws.dir / "weights.csv");
        std::string line;
        int rows = 0;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            ++rows;
            CHECK(std::count(line.begin(), line.end(), ',') == 32);  // path + d_I
        }
        CHECK(rows == 3);  // three good test images
    }

    // identical inputs give identical weight rows
    fs::create_directories(ws.dir / "dup");
    fs::copy_file(ws.dir / "data/widget/test/good/006.png", ws.dir / "dup/a.png");
    fs::copy_file(ws.dir / "data/widget/test/good/006.png", ws.dir / "dup/b.png");
    CliResult dup = run_cli("export-text-weights --checkpoint " + ckpt.string() + " --images " +
                            (ws.dir / "dup").string() + " --out " +
                            (ws.dir / "dup.csv").string());
    CHECK(dup.exit_code == 0);
    {
        std::ifstream f(ws.dir / "dup.csv");
        std::string la, lb;
        std::getline(f, la);
        std::getline(f, lb);
        CHECK(la.substr(la.find(',')) == lb.substr(lb.find(',')));
    }

    // a worker cap through the environment does not change the report
    {
        CliResult plain = run_cli("eval --checkpoint " + ckpt.string() + " --dataset-root " +
                                  (ws.dir / "data").string() + " --out " +
                                  (ws.dir / "out_plain").string());
        CHECK(plain.exit_code == 0);
        const std::string cmd = "VCPSEG_NUM_WORKERS=1 " + std::string(VCPSEG_CLI_BIN) +
                                " eval --checkpoint " + ckpt.string() + " --dataset-root " +
                                (ws.dir / "data").string() + " --out " +
                                (ws.dir / "out_w1").string() + " > /dev/null 2>&1";
        CHECK(std::system(cmd.c_str()) == 0);
        CHECK(file_bytes(ws.dir / "out_w1/eval_report.csv") ==
              file_bytes(ws.dir / "out_plain/eval_report.csv"));
    }

    // unreadable image exits 3
    CHECK(run_cli("predict --checkpoint " + ckpt.string() + " --image /nonexistent.png --out " +
                  (ws.dir / "p2").string())
              .exit_code == 3);
    // missing checkpoint exits 5
    CHECK(run_cli("eval --checkpoint /nonexistent.vcp --dataset-root " +
                  (ws.dir / "data").string())
              .exit_code == 5);
}

TEST_CASE("repeated training runs with one seed produce identical bytes") {
    Workspace ws;
    const std::string cfg = ws.write_config(/*epochs=*/3);
    REQUIRE(run_cli("synth --config " + cfg).exit_code == 0);

    REQUIRE(run_cli("train --config " + cfg).exit_code == 0);
    const std::string ckpt_a = file_bytes(ws.dir / "out/model.vcp");
    const std::string log_a = file_bytes(ws.dir / "out/train_log.jsonl");

    REQUIRE(run_cli("train --config " + cfg).exit_code == 0);
    CHECK(file_bytes(ws.dir / "out/model.vcp") == ckpt_a);
    CHECK(file_bytes(ws.dir / "out/train_log.jsonl") == log_a);

    // a different seed changes the artifact
    REQUIRE(run_cli("train --config " + cfg + " --seed 9").exit_code == 0);
    CHECK(file_bytes(ws.dir / "out/model.vcp") != ckpt_a);
}
