#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "exms/trainer.hpp"

using namespace exms;

namespace {

ModelConfig tiny_model() {
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

DatasetOpts tiny_data_opts() {
  DatasetOpts opts;
  opts.buckets = {{1, 2}};
  opts.classes = {ShapeClass::Circle, ShapeClass::Square};
  opts.width = 32;
  opts.height = 32;
  opts.render = RenderOpts{0.3, 100, 6, 9};
  return opts;
}

std::string fresh_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

// Writes a train/eval dataset pair and returns a ready-to-run config.
RunConfig tiny_run_config(const std::string& base, int64_t steps, Objective objective) {
  DatasetOpts opts = tiny_data_opts();
  write_dataset(base + "/train", sample_counting_dataset(8, opts, 21));
  write_dataset(base + "/eval", sample_counting_dataset(4, opts, 22));
  RunConfig rc;
  rc.model = tiny_model();
  rc.train_data = base + "/train/data.jsonl";
  rc.eval_data = base + "/eval/data.jsonl";
  rc.train.steps = steps;
  rc.train.batch_size = 2;
  rc.train.learning_rate = 1e-3;
  rc.train.seed = 3;
  rc.train.eval_every = 4;
  rc.objective = objective;
  return rc;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

}  // namespace

TEST_CASE("run config json round trip and exhaustive validation") {
  RunConfig rc;
  rc.model = tiny_model();
  rc.train_data = "train.jsonl";
  rc.eval_data = "eval.jsonl";
  rc.train = TrainParams{100, 8, 1e-3, 42, 10};
  rc.objective = Objective::Grouper;

  nlohmann::json j = run_config_to_json(rc);
  RunConfig back = run_config_from_json(j);
  CHECK(run_config_to_json(back) == j);
  CHECK(back.train.seed == 42);
  CHECK(back.objective == Objective::Grouper);

  nlohmann::json bad = j;
  bad["extra"] = 1;
  CHECK_THROWS_AS(run_config_from_json(bad), Error);

  bad = j;
  bad["train"].erase("seed");
  CHECK_THROWS_AS(run_config_from_json(bad), Error);

  bad = j;
  bad["train"]["seed"] = -1;
  CHECK_THROWS_AS(run_config_from_json(bad), Error);

  bad = j;
  bad["train"]["learning_rate"] = "fast";
  CHECK_THROWS_AS(run_config_from_json(bad), Error);

  bad = j;
  bad["objective"] = "ppo";
  CHECK_THROWS_AS(run_config_from_json(bad), Error);

  bad = j;
  bad["loss"]["unknown"] = 0;
  CHECK_THROWS_AS(run_config_from_json(bad), Error);

  // dpo requires a reference checkpoint; other objectives must not carry one
  bad = j;
  bad["objective"] = "dpo";
  try {
    run_config_from_json(bad);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigError);
  }
  bad["reference_checkpoint"] = "ref.bin";
  CHECK(run_config_from_json(bad).objective == Objective::Dpo);
  bad["objective"] = "sft";
  CHECK_THROWS_AS(run_config_from_json(bad), Error);
}

TEST_CASE("gen config json round trip and validation") {
  GenConfig gc;
  gc.n = 24;
  gc.seed = 9;
  gc.opts = tiny_data_opts();
  nlohmann::json j = gen_config_to_json(gc);
  GenConfig back = gen_config_from_json(j);
  CHECK(gen_config_to_json(back) == j);
  CHECK(back.opts.buckets == gc.opts.buckets);
  CHECK(back.opts.classes == gc.opts.classes);

  nlohmann::json bad = j;
  bad["classes"].push_back("hexagon");
  CHECK_THROWS_AS(gen_config_from_json(bad), Error);

  bad = j;
  bad["buckets"] = nlohmann::json::array();
  CHECK_THROWS_AS(gen_config_from_json(bad), Error);

  bad = j;
  bad["n"] = 0;
  CHECK_THROWS_AS(gen_config_from_json(bad), Error);

  bad = j;
  bad.erase("min_size");
  CHECK_THROWS_AS(gen_config_from_json(bad), Error);
}

TEST_CASE("levenshtein and caption reward") {
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("abc", "") == 3);
  CHECK(levenshtein("same", "same") == 0);
  CHECK(caption_reward("abcd", "abcd") == 1.0);
  CHECK(caption_reward("abcd", "abce") == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(caption_reward("", "") == 1.0);
}

TEST_CASE("caption corruption yields distinct well-formed captions") {
  CountMap counts = {{{"circle", "red"}, 2}, {{"square", "blue"}, 1}};
  std::string truth = caption_from_counts(counts);
  CounterRng rng(4);
  for (int i = 0; i < 200; ++i) {
    std::string corrupted = corrupt_caption(counts, rng);
    REQUIRE(corrupted != truth);
    auto parsed = parse_caption(corrupted);
    REQUIRE(parsed.has_value());
    REQUIRE(*parsed != counts);
  }
  CounterRng a(7), b(7);
  CHECK(corrupt_caption(counts, a) == corrupt_caption(counts, b));
}

TEST_CASE("adam converges on a quadratic") {
  Weights w;
  w.params.emplace("x", Tensor({2}, std::vector<double>{10.0, -6.0}, true));
  Adam opt(0.2);
  for (int i = 0; i < 400; ++i) {
    Tensor x = w.at("x");
    Tensor diff = add_scalar(x, -3.0);        // minimize sum((x-3)^2)
    Tensor loss = sum(mul(diff, diff));
    opt.step(w, grad(loss));
  }
  CHECK(std::abs(w.at("x").data()[0] - 3.0) < 1e-3);
  CHECK(std::abs(w.at("x").data()[1] - 3.0) < 1e-3);
  CHECK_THROWS_AS(Adam(0.0), Error);
}

TEST_CASE("sft training runs, logs metrics, and is byte-reproducible") {
  std::string base = fresh_dir("exms_cli_sft");
  RunConfig rc = tiny_run_config(base, 6, Objective::Sft);
  TrainResult res = train_run(rc, base + "/out1");
  CHECK(res.steps_run == 6);
  CHECK(std::isfinite(res.final_loss));
  CHECK(res.final_eval_accuracy >= 0.0);

  auto rows = read_jsonl(res.metrics_path);
  REQUIRE(rows.size() == 6);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i]["step"].get<int64_t>() == static_cast<int64_t>(i + 1));
    CHECK(rows[i]["objective"] == "sft");
    CHECK(std::isfinite(rows[i]["loss"].get<double>()));
    CHECK(rows[i]["loss_mtp"].get<double>() > 0.0);
    CHECK_FALSE(rows[i].contains("tokens_per_sec"));  // EXMS_TIMING unset
    bool eval_step = (i + 1) % 4 == 0 || i + 1 == rows.size();
    CHECK(rows[i].contains("eval_accuracy") == eval_step);
  }

  TrainResult res2 = train_run(rc, base + "/out2");
  CHECK(slurp(res.metrics_path) == slurp(res2.metrics_path));
  CHECK(slurp(res.checkpoint_path) == slurp(res2.checkpoint_path));

  // a different seed changes the metrics
  rc.train.seed = 4;
  TrainResult res3 = train_run(rc, base + "/out3");
  CHECK(slurp(res.metrics_path) != slurp(res3.metrics_path));
}

TEST_CASE("dpo training starts at log 2 from the reference checkpoint") {
  std::string base = fresh_dir("exms_cli_dpo");
  RunConfig rc = tiny_run_config(base, 3, Objective::Dpo);
  Weights ref = init_weights(rc.model, 77);
  save_checkpoint(base + "/ref.bin", rc.model, ref);
  rc.reference_checkpoint = base + "/ref.bin";

  TrainResult res = train_run(rc, base + "/out");
  auto rows = read_jsonl(res.metrics_path);
  REQUIRE(rows.size() == 3);
  CHECK(std::abs(rows[0]["loss"].get<double>() - std::log(2.0)) <= 1e-9);
  CHECK(rows[1]["loss"].get<double>() < rows[0]["loss"].get<double>() + 0.5);

  // reference with a different architecture is rejected
  ModelConfig other = rc.model;
  other.d_ff = 32;
  save_checkpoint(base + "/ref_other.bin", other, init_weights(other, 77));
  rc.reference_checkpoint = base + "/ref_other.bin";
  try {
    train_run(rc, base + "/out_bad");
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigError);
  }
}

TEST_CASE("grouper and grpo objectives train") {
  std::string base = fresh_dir("exms_cli_group");
  for (Objective obj : {Objective::Grouper, Objective::Grpo}) {
    RunConfig rc = tiny_run_config(base, 3, obj);
    TrainResult res = train_run(rc, base + "/out_" + objective_name(obj));
    auto rows = read_jsonl(res.metrics_path);
    REQUIRE(rows.size() == 3);
    for (const auto& row : rows) {
      CHECK(row["objective"] == objective_name(obj));
      CHECK(std::isfinite(row["loss"].get<double>()));
      CHECK(row["loss_mtp"].get<double>() == 0.0);
    }
  }
}

TEST_CASE("diverging loss aborts with a typed error") {
  std::string base = fresh_dir("exms_cli_diverge");
  RunConfig rc = tiny_run_config(base, 50, Objective::Sft);
  rc.train.learning_rate = 1e300;  // first update overflows the forward pass
  try {
    train_run(rc, base + "/out");
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::DivergedLoss);
  }
}

TEST_CASE("evaluation reports chance-level counting for random weights") {
  DatasetOpts opts = tiny_data_opts();
  std::vector<SceneRecord> recs = sample_counting_dataset(12, opts, 31);
  ModelConfig cfg = tiny_model();
  Weights w = init_weights(cfg, 501);
  EvalResult r = evaluate_model(recs, cfg, w);
  CHECK(r.records == 12);
  CHECK(r.counting_accuracy < 0.25);
  CHECK(r.next_token_accuracy < 0.5);
  CHECK(r.grounding_iou_at_05 >= 0.0);
  CHECK(r.grounding_iou_at_05 <= 1.0);
  CHECK_THROWS_AS(evaluate_model({}, cfg, w), Error);
}

TEST_CASE("training accuracy carries over to standalone evaluation") {
  std::string base = fresh_dir("exms_cli_carry");
  RunConfig rc = tiny_run_config(base, 30, Objective::Sft);
  TrainResult res = train_run(rc, base + "/out");
  Checkpoint ck = load_checkpoint(res.checkpoint_path);
  double eval_acc = next_token_accuracy(load_dataset(rc.eval_data), ck.config, ck.weights);
  CHECK(eval_acc == doctest::Approx(res.final_eval_accuracy).epsilon(1e-12));
  double train_acc = next_token_accuracy(load_dataset(rc.train_data), ck.config, ck.weights);
  CHECK(train_acc >= res.final_eval_accuracy - 0.05);
}
