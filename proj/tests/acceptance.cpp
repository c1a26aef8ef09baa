// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "exms/checkpoint.hpp"
#include "exms/checks.hpp"
#include "exms/datagen.hpp"
#include "exms/model.hpp"
#include "exms/trainer.hpp"

using namespace exms;
namespace fs = std::filesystem;

namespace {

double now_secs() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

bool named_pass(const std::vector<CheckResult>& results, const std::set<std::string>& names) {
  std::set<std::string> seen;
  for (const CheckResult& r : results)
    if (names.count(r.name)) {
      if (!r.pass) return false;
      seen.insert(r.name);
    }
  return seen == names;  // every requested check ran and passed
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return in ? ss.str() : std::string("<unreadable:" + path.string() + ">");
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers_enc = 1;
  cfg.n_layers_dec = 1;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 1;
  cfg.head_dim = 16;
  cfg.d_ff = 64;
  cfg.patch_size = 16;
  cfg.merge_factor = 2;
  cfg.max_image_side = 64;
  cfg.mtp_enabled = true;
  cfg.mtp_weight = 0.1;
  return cfg;
}

bool check_mtp_neutrality() {
  const ModelConfig cfg = tiny_config();
  const Weights w = init_weights(cfg, 99);
  ModelConfig cfg_off = cfg;
  cfg_off.mtp_enabled = false;
  Weights w_off;
  for (const auto& [name, tensor] : w.params)
    if (name.rfind("mtp.", 0) != 0) w_off.params.emplace(name, tensor);

  SceneRecord rec = render_scene({{ShapeClass::Circle, ColorName::Red}}, 32, 32, 5,
                                 RenderOpts{0.3, 100, 6, 9});
  const int64_t slots = merged_count(rec.image, cfg);
  const int64_t cols = merged_grid_cols(rec.image, cfg);

  for (int i = 0; i < 50; ++i) {
    CounterRng rng(derive_seed(4242, static_cast<uint64_t>(i)));
    std::string prompt;
    const uint64_t len = 1 + rng.next_below(6);
    for (uint64_t c = 0; c < len; ++c)
      prompt.push_back(static_cast<char>('a' + rng.next_below(26)));

    SamplingParams sp;
    sp.temperature = i % 3 == 0 ? 0.0 : 0.9;
    sp.top_p = 0.9;
    sp.presence_penalty = i % 2 == 0 ? 0.0 : 0.5;
    sp.max_tokens = 10;
    sp.seed = derive_seed(7, static_cast<uint64_t>(i));

    std::optional<ImageBatch> img;
    TokenSeq seq;
    if (i % 2 == 0) {
      seq = make_text_seq(prompt, true, false);
    } else {
      seq = make_vlm_seq(slots, cols, prompt, "", false);
      img = rec.image;
    }
    if (generate(seq, img, cfg, w, sp) != generate(seq, img, cfg_off, w_off, sp)) return false;
  }
  return true;
}

struct SmokeOutcome {
  bool pass = false;
  double accuracy = 0.0;
  double secs = 0.0;
  int64_t params = 0;
};

RunConfig smoke_run_config(const fs::path& dir) {
  RunConfig rc;
  rc.model.d_model = 64;
  rc.model.n_layers_enc = 2;
  rc.model.n_layers_dec = 2;
  rc.model.n_heads = 4;
  rc.model.n_kv_heads = 2;
  rc.model.head_dim = 16;
  rc.model.d_ff = 128;
  rc.model.patch_size = 8;
  rc.model.merge_factor = 4;
  rc.model.max_image_side = 64;
  rc.model.mtp_enabled = true;
  rc.model.mtp_weight = 0.1;
  rc.train_data = (dir / "train" / "data.jsonl").string();
  rc.eval_data = (dir / "eval" / "data.jsonl").string();
  rc.train.steps = 800;
  rc.train.batch_size = 8;
  rc.train.learning_rate = 3e-3;
  rc.train.seed = 5;
  rc.train.eval_every = 50;
  rc.objective = Objective::Sft;
  return rc;
}

DatasetOpts smoke_dataset_opts() {
  DatasetOpts opts;
  opts.buckets = {{1, 2}, {3, 4}};
  opts.classes = {ShapeClass::Circle, ShapeClass::Square};
  opts.width = 64;
  opts.height = 64;
  return opts;
}

SmokeOutcome run_training_smoke(const fs::path& dir) {
  const DatasetOpts opts = smoke_dataset_opts();
  write_dataset((dir / "train").string(), sample_counting_dataset(512, opts, 11));
  write_dataset((dir / "eval").string(), sample_counting_dataset(128, opts, 12));

  const RunConfig rc = smoke_run_config(dir);
  const double t0 = now_secs();
  const TrainResult res = train_run(rc, (dir / "out").string());
  SmokeOutcome outcome;
  outcome.secs = now_secs() - t0;
  outcome.accuracy = res.final_eval_accuracy;
  outcome.params = load_checkpoint(res.checkpoint_path).weights.total_params();

  ImageBatch probe = load_dataset(rc.eval_data).front().image;
  const bool four_tokens = merged_count(probe, rc.model) == 4;
  outcome.pass = outcome.params <= 2000000 && four_tokens && res.steps_run <= 2000 &&
                 outcome.accuracy >= 0.90 && outcome.secs <= 600.0;
  return outcome;
}

bool run_determinism(const fs::path& dir) {
  DatasetOpts opts = smoke_dataset_opts();
  opts.width = 32;
  opts.height = 32;
  opts.render = RenderOpts{0.3, 100, 6, 9};
  opts.buckets = {{1, 2}};
  write_dataset((dir / "dtrain").string(), sample_counting_dataset(24, opts, 21));
  write_dataset((dir / "deval").string(), sample_counting_dataset(8, opts, 22));

  RunConfig rc;
  rc.model = tiny_config();
  rc.train_data = (dir / "dtrain" / "data.jsonl").string();
  rc.eval_data = (dir / "deval" / "data.jsonl").string();
  rc.train.steps = 6;
  rc.train.batch_size = 4;
  rc.train.learning_rate = 1e-3;
  rc.train.seed = 3;
  rc.train.eval_every = 3;
  rc.objective = Objective::Sft;

  train_run(rc, (dir / "run_a").string());
  train_run(rc, (dir / "run_b").string());
  return slurp(dir / "run_a" / "metrics.jsonl") == slurp(dir / "run_b" / "metrics.jsonl") &&
         slurp(dir / "run_a" / "checkpoint.bin") == slurp(dir / "run_b" / "checkpoint.bin");
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "exms_acceptance";
  std::error_code ec;
  fs::remove_all(work, ec);
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<bool()>& body) {
    bool pass = false;
    std::string note;
    try {
      pass = body();
    } catch (const std::exception& e) {
      note = std::string("  (") + e.what() + ")";
    }
    failures += pass ? 0 : 1;
    std::printf("criterion %d (%s): %s%s\n", id, name, pass ? "PASS" : "FAIL", note.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient-oracle", [] {
    const double t0 = now_secs();
    const std::vector<CheckResult> res = run_check_suite("gradients");
    return all_passed(res) && now_secs() - t0 <= 60.0;
  });

  const std::vector<CheckResult> attn = run_check_suite("attention");
  report(2, "gqa-correctness", [&] {
    return named_pass(attn, {"gqa_matches_dense_oracle", "causal_prefix_bit_identical",
                             "window_hides_far_keys_exactly"});
  });
  report(3, "context-parallel-equivalence",
         [&] { return named_pass(attn, {"chunked_matches_dense"}); });

  report(4, "rope-properties", [] { return all_passed(run_check_suite("rope")); });

  const std::vector<CheckResult> losses = run_check_suite("losses");
  report(5, "grouper-advantages", [&] {
    return named_pass(losses, {"grouper_frozen_mapping", "grouper_range_affine",
                               "grouper_degenerate_detected"});
  });
  report(6, "dpo-identity",
         [&] { return named_pass(losses, {"dpo_identity_log2", "dpo_gradient_signs"}); });
  report(7, "grpo-filtering", [&] { return named_pass(losses, {"grpo_filter_and_zero_sum"}); });

  report(8, "mtp-inference-neutrality", check_mtp_neutrality);

  const std::vector<CheckResult> data = run_check_suite("data");
  report(9, "bbox-convention",
         [&] { return named_pass(data, {"bbox_frozen_examples", "bbox_roundtrip_bound"}); });
  report(10, "counting-balance",
         [&] { return named_pass(data, {"counting_balance_and_captions"}); });

  SmokeOutcome smoke;
  report(11, "training-smoke", [&] {
    smoke = run_training_smoke(work);
    return smoke.pass;
  });
  std::printf("  smoke: eval_accuracy=%.4f params=%lld wall=%.1fs\n", smoke.accuracy,
              static_cast<long long>(smoke.params), smoke.secs);

  report(12, "determinism", [&] { return run_determinism(work); });

  fs::remove_all(work, ec);
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
