#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "exms/checkpoint.hpp"
#include "exms/datagen.hpp"
#include "exms/losses.hpp"
#include "exms/model.hpp"

namespace exms {

enum class Objective : uint8_t { Sft, Dpo, Grouper, Grpo };

const char* objective_name(Objective o);
std::optional<Objective> objective_from_name(const std::string& s);

struct TrainParams {
  int64_t steps = 0;
  int64_t batch_size = 0;
  double learning_rate = 0.0;
  uint64_t seed = 0;       // mandatory in config files; never defaulted
  int64_t eval_every = 0;  // held-out accuracy cadence, in steps
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  std::string train_data;  // JSONL path
  std::string eval_data;   // JSONL path
  TrainParams train;
  Objective objective = Objective::Sft;
  std::string reference_checkpoint;  // required iff objective == dpo
};

void validate(const RunConfig& rc);
nlohmann::json run_config_to_json(const RunConfig& rc);
// Exhaustive: unknown keys, missing keys, or wrong types raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// Dataset-generation config mirrors DatasetOpts plus sample count and seed.
struct GenConfig {
  int64_t n = 0;
  uint64_t seed = 0;
  DatasetOpts opts;
};

nlohmann::json gen_config_to_json(const GenConfig& gc);
GenConfig gen_config_from_json(const nlohmann::json& j);
GenConfig load_gen_config(const std::string& path);

// Adam with bias correction; state is keyed by parameter name so update
// order never depends on map iteration details.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(Weights& w, const GradMap& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct MetricRecord {
  int64_t step = 0;
  std::string objective;
  double loss = 0.0;
  double loss_main = 0.0;
  double loss_mtp = 0.0;
  std::optional<double> tokens_per_sec;  // emitted only when EXMS_TIMING=1
  std::optional<double> eval_accuracy;
};

nlohmann::json metric_to_json(const MetricRecord& m);

// Edit distance and the reward used for preference groups:
// 1 - lev(truth, candidate) / max(|truth|, |candidate|, 1).
int64_t levenshtein(const std::string& a, const std::string& b);
double caption_reward(const std::string& truth, const std::string& candidate);

// A well-formed caption that differs from the one described by `counts`
// (count bumped, color/class swapped, or a group dropped).
std::string corrupt_caption(const CountMap& counts, CounterRng& rng);

// Teacher-forced argmax accuracy over caption+EOS targets.
double next_token_accuracy(const std::vector<SceneRecord>& recs, const ModelConfig& cfg,
                           const Weights& w);

struct TrainResult {
  double final_loss = 0.0;
  double final_eval_accuracy = 0.0;
  int64_t steps_run = 0;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Full training run: writes <out_dir>/metrics.jsonl and
// <out_dir>/checkpoint.bin; byte-reproducible from (config, seed).
TrainResult train_run(const RunConfig& rc, const std::string& out_dir);

struct EvalResult {
  int64_t records = 0;
  double next_token_accuracy = 0.0;
  double caption_exact_match = 0.0;
  double counting_accuracy = 0.0;
  double grounding_iou_at_05 = 0.0;  // over records with at least one object
};

nlohmann::json eval_to_json(const EvalResult& r);
EvalResult evaluate_model(const std::vector<SceneRecord>& recs, const ModelConfig& cfg,
                          const Weights& w);

}  // namespace exms
