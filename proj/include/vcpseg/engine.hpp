#pragma once

#include "vcpseg/config.hpp"
#include "vcpseg/data.hpp"
#include "vcpseg/heads.hpp"
#include "vcpseg/loss.hpp"
#include "vcpseg/metrics.hpp"
#include "vcpseg/prompt.hpp"

#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

namespace vcpseg {

// Trainable state bound to one frozen backbone.
struct ModelState {
    std::shared_ptr<const Backbone> backbone;
    std::shared_ptr<const Tokenizer> tokenizer;
    RunOptions opts;
    PromptTemplate tpl;
    PromptParams prompt;
    HeadParams heads;
    EmbeddingSequence normal_base;    // category span zero-filled
    EmbeddingSequence abnormal_base;
    std::map<std::string, ad::Var> params;  // canonical name -> leaf

    std::uint64_t params_hash() const;
};

ModelState build_model(std::shared_ptr<const Backbone> backbone,
                       std::shared_ptr<const Tokenizer> tokenizer, const RunOptions& opts);

// One image through Pre-VCP -> deep-prompted text encoder -> both map
// branches; maps are at (image_size, image_size) resolution.
struct MapsForward {
    std::vector<ad::Var> m1;  // per tap, hw x 2
    std::vector<ad::Var> m2;
    ad::Var f_t;              // 2 x C
    ad::Var o_last;           // 2 x d_I from the last tap
    std::vector<std::vector<Eigen::MatrixXd>> attention;  // per tap, M heads of 2 x HW
};
MapsForward forward_maps(const ModelState& model, const VisualOutput& features);

struct AnomalyResult {
    Eigen::VectorXd fused;  // hw, abnormal probability after fusion
    Eigen::MatrixXd m1;     // hw x 2, combined over taps
    Eigen::MatrixXd m2;
    std::vector<Eigen::MatrixXd> m1_layers;
    std::vector<Eigen::MatrixXd> m2_layers;
    double image_score = 0.0;
    int h = 0, w = 0;
};
AnomalyResult infer(const ModelState& model, const ImageTensor& image);
AnomalyResult infer_features(const ModelState& model, const VisualOutput& features,
                             double alpha_override = -1.0);

struct TrainStats {
    int steps = 0;
    double first_step_loss = 0.0;
    double first_epoch_mean = 0.0;
    double last_epoch_mean = 0.0;
};

// Adam over the trainable parameters only; deterministic given the seed. The
// JSON-lines step log goes to `log` when given. On a non-finite loss the last
// finite-state parameters are written to diverged_path (when set) and
// DivergedError is thrown.
TrainStats train(ModelState& model, const std::vector<Sample>& dataset,
                 std::ostream* log = nullptr, const std::string& diverged_path = "");

void save_checkpoint(const ModelState& model, const RunConfig& cfg,
                     const std::vector<std::string>& train_products, const std::string& path,
                     const std::string& metrics_json = "");

// Rebuilds backbone + tokenizer + model from the sidecar config and loads the
// trainable tensors. Prints a warning to stderr when the backbone hash
// disagrees with the sidecar.
struct Session {
    RunConfig cfg;
    std::shared_ptr<Backbone> backbone;
    std::shared_ptr<Tokenizer> tokenizer;
    ModelState model;
    std::vector<std::string> train_products;
};
Session make_session(const RunConfig& cfg);
Session load_checkpoint(const std::string& path);

PreprocessSpec preprocess_spec(const RunOptions& opts);

// Evaluation over a scanned test split. scores_from_masks is a test hook
// replacing model scores with the ground truth. Parallel over images, capped
// by VCPSEG_NUM_WORKERS.
struct EvalOutcome {
    metrics::EvalReport report;
    std::vector<metrics::ScoredSample> samples;
};
EvalOutcome evaluate(const ModelState& model, const std::vector<Sample>& samples, double alpha,
                     bool scores_from_masks = false);

}  // namespace vcpseg
