#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "exms/checkpoint.hpp"
#include "exms/checks.hpp"
#include "exms/datagen.hpp"
#include "exms/model.hpp"
#include "exms/trainer.hpp"

namespace {

int run_gen_data(const std::string& config_path, const std::string& out_dir) {
  exms::GenConfig gc = exms::load_gen_config(config_path);
  std::vector<exms::SceneRecord> records = exms::sample_counting_dataset(gc.n, gc.opts, gc.seed);
  exms::write_dataset(out_dir, records);
  std::printf("wrote %zu records to %s\n", records.size(), out_dir.c_str());
  return 0;
}

int run_train(const std::string& config_path, const std::string& out_dir) {
  exms::RunConfig rc = exms::load_run_config(config_path);
  exms::TrainResult res = exms::train_run(rc, out_dir);
  nlohmann::json j;
  j["final_loss"] = res.final_loss;
  j["final_eval_accuracy"] = res.final_eval_accuracy;
  j["steps_run"] = res.steps_run;
  j["checkpoint"] = res.checkpoint_path;
  j["metrics"] = res.metrics_path;
  std::cout << j.dump() << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path) {
  exms::Checkpoint ck = exms::load_checkpoint(ckpt_path);
  std::vector<exms::SceneRecord> records = exms::load_dataset(data_path);
  exms::EvalResult res = exms::evaluate_model(records, ck.config, ck.weights);
  std::cout << exms::eval_to_json(res).dump() << "\n";
  return 0;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string prompt;
  std::string image;
  int64_t image_slots = 0;
  exms::SamplingParams sp;
};

int run_generate(const GenerateArgs& args) {
  exms::Checkpoint ck = exms::load_checkpoint(args.checkpoint);
  std::optional<exms::ImageBatch> img;
  int64_t slots = args.image_slots;
  if (!args.image.empty()) {
    img = exms::read_ppm(args.image);
    if (slots == 0) slots = exms::merged_count(*img, ck.config);
  }
  exms::TokenSeq seq;
  if (slots > 0) {
    int64_t cols = img ? exms::merged_grid_cols(*img, ck.config) : slots;
    seq = exms::make_vlm_seq(slots, cols, args.prompt, "", /*add_eos=*/false);
  } else {
    seq = exms::make_text_seq(args.prompt, /*add_bos=*/true, /*add_eos=*/false);
  }
  std::vector<int32_t> out = exms::generate(seq, img, ck.config, ck.weights, args.sp);
  std::string ids = "tokens:";
  for (int32_t id : out) ids += " " + std::to_string(id);
  std::printf("%s\n%s\n", ids.c_str(), exms::decode_bytes(out).c_str());
  return 0;
}

int run_check(const std::string& suite, bool sabotage) {
  exms::CheckOptions opts;
  opts.sabotage = sabotage;
  std::vector<exms::CheckResult> results = exms::run_check_suite(suite, opts);
  int64_t failed = 0;
  for (const exms::CheckResult& r : results) {
    std::printf("%-10s %-34s tol=%-8.3g observed=%-12.4g %s\n", r.suite.c_str(), r.name.c_str(),
                r.tolerance, r.observed, r.pass ? "pass" : "FAIL");
    failed += r.pass ? 0 : 1;
  }
  std::printf("%zu checks, %lld failed\n", results.size(), static_cast<long long>(failed));
  return exms::all_passed(results) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exms: a small vision-language model with verifiable mechanics"};
  app.require_subcommand(1);

  std::string gen_config, gen_out;
  CLI::App* gen = app.add_subcommand("gen-data", "Render a synthetic counting dataset");
  gen->add_option("--config", gen_config, "generation config (JSON)")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  std::string train_config, train_out;
  CLI::App* train = app.add_subcommand("train", "Run a training job from a run config");
  train->add_option("--config", train_config, "run config (JSON)")->required();
  train->add_option("--out", train_out, "output directory for metrics + checkpoint")->required();

  std::string eval_ckpt, eval_data;
  CLI::App* evaluate = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  evaluate->add_option("--data", eval_data, "dataset data.jsonl")->required();

  GenerateArgs ga;
  CLI::App* generate = app.add_subcommand("generate", "Sample a completion from a checkpoint");
  generate->add_option("--checkpoint", ga.checkpoint, "checkpoint file")->required();
  generate->add_option("--prompt", ga.prompt, "text prompt (default empty)");
  generate->add_option("--image", ga.image, "PPM image to condition on");
  generate->add_option("--image-slots", ga.image_slots,
                       "visual slot count; derived from --image when omitted");
  generate->add_option("--temperature", ga.sp.temperature, "softmax temperature (0 = greedy)");
  generate->add_option("--top-p", ga.sp.top_p, "nucleus mass");
  generate->add_option("--presence-penalty", ga.sp.presence_penalty,
                       "logit penalty on already-emitted tokens");
  generate->add_option("--max-tokens", ga.sp.max_tokens, "generation cap");
  generate->add_option("--seed", ga.sp.seed, "sampler seed");

  std::string suite = "all";
  bool sabotage = false;
  CLI::App* check = app.add_subcommand("check", "Run verification suites");
  check->add_option("--suite", suite, "gradients|attention|rope|losses|data|all");
  check->add_flag("--sabotage", sabotage,
                  "offset one analytic gradient so the gradient checks must fail");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(gen_config, gen_out);
    if (train->parsed()) return run_train(train_config, train_out);
    if (evaluate->parsed()) return run_eval(eval_ckpt, eval_data);
    if (generate->parsed()) return run_generate(ga);
    if (check->parsed()) return run_check(suite, sabotage);
  } catch (const exms::Error& e) {
    // what() is "Name: message"; strip the name so it is not printed twice.
    std::string msg = e.what();
    const std::string prefix = std::string(exms::errc_name(e.code())) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    std::fprintf(stderr, "error[%s]: %s\n", exms::errc_name(e.code()), msg.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
