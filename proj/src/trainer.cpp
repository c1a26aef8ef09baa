#include "exms/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace exms {

namespace {

// ---- logging ----------------------------------------------------------

enum class LogLevel { Debug = 0, Info = 1, Warn = 2 };

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("EXMS_LOG");
    if (env && std::string(env) == "debug") return LogLevel::Debug;
    if (env && std::string(env) == "warn") return LogLevel::Warn;
    return LogLevel::Info;
  }();
  return level;
}

bool log_on(LogLevel lvl) { return static_cast<int>(lvl) >= static_cast<int>(log_level()); }

bool timing_enabled() {
  const char* env = std::getenv("EXMS_TIMING");
  return env && std::string(env) == "1";
}

// ---- exhaustive JSON helpers ------------------------------------------

void expect_keys(const nlohmann::json& j, const std::vector<std::string>& required,
                 const std::vector<std::string>& optional, const std::string& where) {
  require(j.is_object(), Errc::ConfigError, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = std::count(required.begin(), required.end(), it.key()) ||
                 std::count(optional.begin(), optional.end(), it.key());
    require(known, Errc::ConfigError, where + ": unknown key \"" + it.key() + "\"");
  }
  for (const std::string& key : required)
    require(j.contains(key), Errc::ConfigError, where + ": missing key \"" + key + "\"");
}

int64_t get_int(const nlohmann::json& j, const std::string& key, const std::string& where) {
  require(j[key].is_number_integer() || j[key].is_number_unsigned(), Errc::ConfigError,
          where + "." + key + " must be an integer");
  return j[key].get<int64_t>();
}

uint64_t get_seed(const nlohmann::json& j, const std::string& key, const std::string& where) {
  require(j[key].is_number_unsigned() ||
              (j[key].is_number_integer() && j[key].get<int64_t>() >= 0),
          Errc::ConfigError, where + "." + key + " must be a non-negative integer");
  return j[key].get<uint64_t>();
}

double get_double(const nlohmann::json& j, const std::string& key, const std::string& where) {
  require(j[key].is_number(), Errc::ConfigError, where + "." + key + " must be a number");
  return j[key].get<double>();
}

std::string get_string(const nlohmann::json& j, const std::string& key,
                       const std::string& where) {
  require(j[key].is_string(), Errc::ConfigError, where + "." + key + " must be a string");
  return j[key].get<std::string>();
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), Errc::IoError, "cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::ConfigError, "bad JSON in " + path + ": " + e.what());
  }
  return j;
}

// ---- model plumbing ---------------------------------------------------

Weights clone_weights(const Weights& src) {
  Weights out;
  for (const auto& [name, t] : src.params) {
    std::vector<double> data(t.data(), t.data() + t.numel());
    out.params.emplace(name, Tensor(t.shape(), std::move(data), true));
  }
  return out;
}

struct CaptionSeq {
  TokenSeq seq;
  int64_t completion_begin = 0;  // index of the first caption byte
};

CaptionSeq caption_seq(const SceneRecord& rec, const ModelConfig& cfg,
                       const std::string& completion) {
  int64_t slots = merged_count(rec.image, cfg);
  int64_t cols = merged_grid_cols(rec.image, cfg);
  CaptionSeq out;
  out.seq = make_vlm_seq(slots, cols, "", completion, true);
  out.completion_begin = 1 + slots;
  return out;
}

Tensor image_embeds(const ImageBatch& img, const ModelConfig& cfg, const Weights& w) {
  Patches p = patchify(img, cfg);
  Tensor enc = encode_patches(p, cfg, w);
  return merge_tokens(enc, p.rows, p.cols, cfg, w);
}

// Per-token log-probs of the completion (caption bytes + EOS) given the
// prefix; rows t in [begin-1, T-1) score targets ids[t+1].
Tensor completion_logprobs(const TokenSeq& seq, int64_t completion_begin, const Tensor& vis,
                           const ModelConfig& cfg, const Weights& w) {
  Tensor logits = decoder_forward(seq, vis, cfg, w);
  int64_t t_len = seq.size();
  std::vector<int32_t> targets(static_cast<size_t>(t_len - 1));
  for (int64_t t = 0; t + 1 < t_len; ++t) targets[static_cast<size_t>(t)] = seq.ids[t + 1];
  return gather_logprobs(logits, targets, completion_begin - 1, t_len - 1);
}

struct SftTerms {
  Tensor main;
  std::optional<Tensor> mtp;
  int64_t tokens = 0;
};

SftTerms record_sft_terms(const SceneRecord& rec, const ModelConfig& cfg, const Weights& w) {
  CaptionSeq cs = caption_seq(rec, cfg, rec.caption);
  Tensor vis = image_embeds(rec.image, cfg, w);
  Tensor logits = decoder_forward(cs.seq, vis, cfg, w);
  int64_t t_len = cs.seq.size();
  std::vector<int32_t> targets(static_cast<size_t>(t_len), 0);
  std::vector<uint8_t> mask(static_cast<size_t>(t_len), 0);
  for (int64_t t = 0; t + 1 < t_len; ++t) {
    targets[static_cast<size_t>(t)] = cs.seq.ids[t + 1];
    mask[static_cast<size_t>(t)] = t + 1 >= cs.completion_begin ? 1 : 0;
  }
  SftTerms out;
  out.main = sft_loss(logits, targets, mask);
  out.tokens = t_len;
  if (cfg.mtp_enabled && t_len >= 3) {
    std::vector<uint8_t> mtp_mask(static_cast<size_t>(t_len), 0);
    for (int64_t p = std::max<int64_t>(cs.completion_begin, 2); p < t_len; ++p)
      mtp_mask[static_cast<size_t>(p)] = 1;
    out.mtp = mtp_loss(cs.seq, vis, cfg, w, mtp_mask);
  }
  return out;
}

const std::vector<std::string>& all_color_names() {
  static const std::vector<std::string> names = {"red", "green", "blue"};
  return names;
}

const std::vector<std::string>& all_shape_names() {
  static const std::vector<std::string> names = {"rectangle", "square", "circle", "triangle"};
  return names;
}

double norm_box_iou(const BBox& a, const BBox& b) {
  double ix = static_cast<double>(std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = static_cast<double>(std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  if (ix <= 0 || iy <= 0) return 0.0;
  double inter = ix * iy;
  double ua = static_cast<double>((a.x2 - a.x1) * (a.y2 - a.y1));
  double ub = static_cast<double>((b.x2 - b.x1) * (b.y2 - b.y1));
  return inter / (ua + ub - inter);
}

}  // namespace

// ---- objective names ---------------------------------------------------

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::Sft: return "sft";
    case Objective::Dpo: return "dpo";
    case Objective::Grouper: return "grouper";
    case Objective::Grpo: return "grpo";
  }
  return "sft";
}

std::optional<Objective> objective_from_name(const std::string& s) {
  if (s == "sft") return Objective::Sft;
  if (s == "dpo") return Objective::Dpo;
  if (s == "grouper") return Objective::Grouper;
  if (s == "grpo") return Objective::Grpo;
  return std::nullopt;
}

// ---- run config ---------------------------------------------------------

void validate(const RunConfig& rc) {
  validate(rc.model);
  validate(rc.loss);
  require(!rc.train_data.empty() && !rc.eval_data.empty(), Errc::ConfigError,
          "data.train and data.eval paths must be non-empty");
  require(rc.train.steps >= 1, Errc::ConfigError, "train.steps must be >= 1");
  require(rc.train.batch_size >= 1, Errc::ConfigError, "train.batch_size must be >= 1");
  require(std::isfinite(rc.train.learning_rate) && rc.train.learning_rate > 0.0,
          Errc::ConfigError, "train.learning_rate must be positive");
  require(rc.train.eval_every >= 1, Errc::ConfigError, "train.eval_every must be >= 1");
  if (rc.objective == Objective::Dpo)
    require(!rc.reference_checkpoint.empty(), Errc::ConfigError,
            "objective dpo requires reference_checkpoint");
  else
    require(rc.reference_checkpoint.empty(), Errc::ConfigError,
            "reference_checkpoint is only valid for objective dpo");
}

nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = model_config_to_json(rc.model);
  j["loss"] = {{"beta", rc.loss.beta},
               {"group_size", rc.loss.group_size},
               {"zero_variance_eps", rc.loss.zero_variance_eps}};
  j["data"] = {{"train", rc.train_data}, {"eval", rc.eval_data}};
  j["train"] = {{"steps", rc.train.steps},
                {"batch_size", rc.train.batch_size},
                {"learning_rate", rc.train.learning_rate},
                {"seed", rc.train.seed},
                {"eval_every", rc.train.eval_every}};
  j["objective"] = objective_name(rc.objective);
  if (rc.objective == Objective::Dpo) j["reference_checkpoint"] = rc.reference_checkpoint;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  expect_keys(j, {"model", "loss", "data", "train", "objective"}, {"reference_checkpoint"},
              "run config");
  RunConfig rc;
  rc.model = model_config_from_json(j["model"]);

  const nlohmann::json& jl = j["loss"];
  expect_keys(jl, {"beta", "group_size", "zero_variance_eps"}, {}, "loss");
  rc.loss.beta = get_double(jl, "beta", "loss");
  rc.loss.group_size = get_int(jl, "group_size", "loss");
  rc.loss.zero_variance_eps = get_double(jl, "zero_variance_eps", "loss");

  const nlohmann::json& jd = j["data"];
  expect_keys(jd, {"train", "eval"}, {}, "data");
  rc.train_data = get_string(jd, "train", "data");
  rc.eval_data = get_string(jd, "eval", "data");

  const nlohmann::json& jt = j["train"];
  expect_keys(jt, {"steps", "batch_size", "learning_rate", "seed", "eval_every"}, {}, "train");
  rc.train.steps = get_int(jt, "steps", "train");
  rc.train.batch_size = get_int(jt, "batch_size", "train");
  rc.train.learning_rate = get_double(jt, "learning_rate", "train");
  rc.train.seed = get_seed(jt, "seed", "train");
  rc.train.eval_every = get_int(jt, "eval_every", "train");

  std::string obj = get_string(j, "objective", "run config");
  std::optional<Objective> parsed = objective_from_name(obj);
  require(parsed.has_value(), Errc::ConfigError, "unknown objective \"" + obj + "\"");
  rc.objective = *parsed;
  if (j.contains("reference_checkpoint"))
    rc.reference_checkpoint = get_string(j, "reference_checkpoint", "run config");
  validate(rc);
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(load_json_file(path));
}

// ---- gen config ----------------------------------------------------------

nlohmann::json gen_config_to_json(const GenConfig& gc) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& [lo, hi] : gc.opts.buckets) buckets.push_back({lo, hi});
  nlohmann::json classes = nlohmann::json::array();
  for (ShapeClass c : gc.opts.classes) classes.push_back(shape_name(c));
  return nlohmann::json{{"n", gc.n},
                        {"seed", gc.seed},
                        {"width", gc.opts.width},
                        {"height", gc.opts.height},
                        {"buckets", buckets},
                        {"classes", classes},
                        {"iou_cap", gc.opts.render.iou_cap},
                        {"max_retries", gc.opts.render.max_retries},
                        {"min_size", gc.opts.render.min_size},
                        {"max_size", gc.opts.render.max_size}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
  expect_keys(j,
              {"n", "seed", "width", "height", "buckets", "classes", "iou_cap", "max_retries",
               "min_size", "max_size"},
              {}, "gen config");
  GenConfig gc;
  gc.n = get_int(j, "n", "gen config");
  gc.seed = get_seed(j, "seed", "gen config");
  gc.opts.width = get_int(j, "width", "gen config");
  gc.opts.height = get_int(j, "height", "gen config");
  require(j["buckets"].is_array() && !j["buckets"].empty(), Errc::ConfigError,
          "gen config.buckets must be a non-empty array");
  gc.opts.buckets.clear();
  for (const nlohmann::json& b : j["buckets"]) {
    require(b.is_array() && b.size() == 2 && b[0].is_number_integer() && b[1].is_number_integer(),
            Errc::ConfigError, "each bucket must be [lo, hi]");
    gc.opts.buckets.emplace_back(b[0].get<int64_t>(), b[1].get<int64_t>());
  }
  require(j["classes"].is_array() && !j["classes"].empty(), Errc::ConfigError,
          "gen config.classes must be a non-empty array");
  gc.opts.classes.clear();
  for (const nlohmann::json& c : j["classes"]) {
    require(c.is_string(), Errc::ConfigError, "each class must be a string");
    std::optional<ShapeClass> parsed = shape_from_name(c.get<std::string>());
    require(parsed.has_value(), Errc::ConfigError,
            "unknown class \"" + c.get<std::string>() + "\"");
    gc.opts.classes.push_back(*parsed);
  }
  gc.opts.render.iou_cap = get_double(j, "iou_cap", "gen config");
  gc.opts.render.max_retries = static_cast<int>(get_int(j, "max_retries", "gen config"));
  gc.opts.render.min_size = get_int(j, "min_size", "gen config");
  gc.opts.render.max_size = get_int(j, "max_size", "gen config");
  require(gc.n >= 1, Errc::ConfigError, "gen config.n must be >= 1");
  return gc;
}

GenConfig load_gen_config(const std::string& path) {
  return gen_config_from_json(load_json_file(path));
}

// ---- optimizer -----------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  require(std::isfinite(lr) && lr > 0.0, Errc::ConfigError, "learning rate must be positive");
}

void Adam::step(Weights& w, const GradMap& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : w.params) {
    Tensor g = grads.at(p);
    const size_t n = static_cast<size_t>(p.numel());
    std::vector<double>& m = m_[name];
    std::vector<double>& v = v_[name];
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    double* pd = p.data();
    const double* gd = g.data();
    for (size_t i = 0; i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gd[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gd[i] * gd[i];
      pd[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

// ---- metrics ---------------------------------------------------------------

nlohmann::json metric_to_json(const MetricRecord& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["objective"] = m.objective;
  j["loss"] = m.loss;
  j["loss_main"] = m.loss_main;
  j["loss_mtp"] = m.loss_mtp;
  if (m.tokens_per_sec) j["tokens_per_sec"] = *m.tokens_per_sec;
  if (m.eval_accuracy) j["eval_accuracy"] = *m.eval_accuracy;
  return j;
}

// ---- rewards and corruptions ------------------------------------------------

int64_t levenshtein(const std::string& a, const std::string& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int64_t> row(m + 1);
  for (size_t jx = 0; jx <= m; ++jx) row[jx] = static_cast<int64_t>(jx);
  for (size_t i = 1; i <= n; ++i) {
    int64_t diag = row[0];
    row[0] = static_cast<int64_t>(i);
    for (size_t jx = 1; jx <= m; ++jx) {
      int64_t up = row[jx];
      int64_t sub = diag + (a[i - 1] == b[jx - 1] ? 0 : 1);
      row[jx] = std::min({row[jx] + 1, row[jx - 1] + 1, sub});
      diag = up;
    }
  }
  return row[m];
}

double caption_reward(const std::string& truth, const std::string& candidate) {
  double denom = static_cast<double>(std::max<size_t>({truth.size(), candidate.size(), 1}));
  return 1.0 - static_cast<double>(levenshtein(truth, candidate)) / denom;
}

std::string corrupt_caption(const CountMap& counts, CounterRng& rng) {
  if (counts.empty()) return "1 red circle";
  CountMap mutated = counts;
  auto it = mutated.begin();
  std::advance(it, static_cast<int64_t>(rng.next_below(mutated.size())));
  auto [key, count] = *it;
  uint64_t kind = rng.next_below(mutated.size() >= 2 ? 4 : 3);
  if (kind == 0) {
    it->second = count + 1;
  } else if (kind == 1) {  // recolor the group
    const auto& colors = all_color_names();
    size_t cur = static_cast<size_t>(
        std::find(colors.begin(), colors.end(), key.second) - colors.begin());
    std::string next = colors[(cur + 1 + rng.next_below(colors.size() - 1)) % colors.size()];
    mutated.erase(it);
    mutated[{key.first, next}] += count;
  } else if (kind == 2) {  // reclassify the group
    const auto& shapes = all_shape_names();
    size_t cur = static_cast<size_t>(
        std::find(shapes.begin(), shapes.end(), key.first) - shapes.begin());
    std::string next = shapes[(cur + 1 + rng.next_below(shapes.size() - 1)) % shapes.size()];
    mutated.erase(it);
    mutated[{next, key.second}] += count;
  } else {  // drop the group
    mutated.erase(it);
  }
  if (mutated == counts) {
    ++mutated.begin()->second;
  }
  return caption_from_counts(mutated);
}

// ---- evaluation ---------------------------------------------------------

double next_token_accuracy(const std::vector<SceneRecord>& recs, const ModelConfig& cfg,
                           const Weights& w) {
  require(!recs.empty(), Errc::EmptyBatch, "no records to evaluate");
  NoGradGuard ng;
  int64_t hits = 0, total = 0;
  for (const SceneRecord& rec : recs) {
    CaptionSeq cs = caption_seq(rec, cfg, rec.caption);
    Tensor vis = image_embeds(rec.image, cfg, w);
    Tensor logits = decoder_forward(cs.seq, vis, cfg, w);
    const int64_t vocab = logits.dim(1);
    for (int64_t t = cs.completion_begin - 1; t + 1 < cs.seq.size(); ++t) {
      const double* row = logits.data() + t * vocab;
      int64_t best = 0;
      for (int64_t v = 1; v < vocab; ++v)
        if (row[v] > row[best]) best = v;
      hits += best == cs.seq.ids[t + 1] ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

nlohmann::json eval_to_json(const EvalResult& r) {
  return nlohmann::json{{"records", r.records},
                        {"next_token_accuracy", r.next_token_accuracy},
                        {"caption_exact_match", r.caption_exact_match},
                        {"counting_accuracy", r.counting_accuracy},
                        {"grounding_iou_at_05", r.grounding_iou_at_05}};
}

EvalResult evaluate_model(const std::vector<SceneRecord>& recs, const ModelConfig& cfg,
                          const Weights& w) {
  require(!recs.empty(), Errc::FormatError, "dataset holds no records");
  NoGradGuard ng;
  EvalResult out;
  out.records = static_cast<int64_t>(recs.size());
  out.next_token_accuracy = next_token_accuracy(recs, cfg, w);

  SamplingParams greedy;
  greedy.temperature = 0.0;
  greedy.top_p = 1.0;
  greedy.max_tokens = 96;
  int64_t exact = 0, counting = 0, grounding_hits = 0, grounding_total = 0;
  for (const SceneRecord& rec : recs) {
    int64_t slots = merged_count(rec.image, cfg);
    int64_t cols = merged_grid_cols(rec.image, cfg);
    TokenSeq prompt = make_vlm_seq(slots, cols, "", "", /*add_eos=*/false);
    std::vector<int32_t> ids = generate(prompt, rec.image, cfg, w, greedy);
    std::string text = decode_bytes(ids);
    exact += text == rec.caption ? 1 : 0;
    auto parsed = parse_caption(text);
    counting += parsed.has_value() && *parsed == rec.count_targets ? 1 : 0;

    if (!rec.objects.empty()) {
      ++grounding_total;
      const SceneObject& obj = rec.objects[0];
      std::string ask = std::string("loc ") + color_name(obj.color) + " " +
                        shape_name(obj.shape) + ": ";
      TokenSeq gp = make_vlm_seq(slots, cols, ask, "", /*add_eos=*/false);
      std::string reply = decode_bytes(generate(gp, rec.image, cfg, w, greedy));
      long long x1, y1, x2, y2;
      int used = 0;
      if (std::sscanf(reply.c_str(), "(%lld,%lld,%lld,%lld)%n", &x1, &y1, &x2, &y2, &used) == 4 &&
          used == static_cast<int>(reply.size())) {
        BBox pred{x1, y1, x2, y2};
        bool ok = true;
        try {
          validate(pred);
        } catch (const Error&) {
          ok = false;
        }
        if (ok) {
          double best = 0.0;
          for (const SceneObject& cand : rec.objects)
            if (cand.color == obj.color && cand.shape == obj.shape)
              best = std::max(best, norm_box_iou(pred, cand.norm_bbox));
          grounding_hits += best >= 0.5 ? 1 : 0;
        }
      }
    }
  }
  out.caption_exact_match = static_cast<double>(exact) / static_cast<double>(recs.size());
  out.counting_accuracy = static_cast<double>(counting) / static_cast<double>(recs.size());
  out.grounding_iou_at_05 =
      grounding_total == 0
          ? 0.0
          : static_cast<double>(grounding_hits) / static_cast<double>(grounding_total);
  return out;
}

// ---- training --------------------------------------------------------------

TrainResult train_run(const RunConfig& rc, const std::string& out_dir) {
  validate(rc);
  std::vector<SceneRecord> train_recs = load_dataset(rc.train_data);
  std::vector<SceneRecord> eval_recs = load_dataset(rc.eval_data);

  Weights w;
  Weights ref_w;
  if (rc.objective == Objective::Dpo) {
    Checkpoint ref = load_checkpoint(rc.reference_checkpoint);
    require(model_config_to_json(ref.config) == model_config_to_json(rc.model),
            Errc::ConfigError, "reference checkpoint config differs from run config model");
    ref_w = std::move(ref.weights);
    w = clone_weights(ref_w);
  } else {
    w = init_weights(rc.model, rc.train.seed);
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, Errc::IoError, "cannot create directory " + out_dir);
  const std::string metrics_path = out_dir + "/metrics.jsonl";
  const std::string checkpoint_path = out_dir + "/checkpoint.bin";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  require(metrics.good(), Errc::IoError, "cannot open " + metrics_path + " for writing");

  Adam opt(rc.train.learning_rate);
  CounterRng batch_rng(derive_seed(rc.train.seed, 1));
  CounterRng corrupt_rng(derive_seed(rc.train.seed, 2));
  const int64_t n = static_cast<int64_t>(train_recs.size());
  const int64_t group = rc.loss.group_size;
  const bool timing = timing_enabled();
  // DPO reference embeddings never change; cache them per record.
  std::unordered_map<int64_t, Tensor> ref_vis_cache;

  TrainResult result;
  for (int64_t step = 1; step <= rc.train.steps; ++step) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<int64_t> batch(static_cast<size_t>(rc.train.batch_size));
    for (int64_t& idx : batch)
      idx = static_cast<int64_t>(batch_rng.next_below(static_cast<uint64_t>(n)));

    Tensor loss;
    double loss_main = 0.0, loss_mtp = 0.0;
    int64_t tokens = 0;
    double lv = 0.0;
    const double inv_b = 1.0 / static_cast<double>(rc.train.batch_size);

    // Inputs were validated up front; a non-finite value creeping into the
    // step (activations, gradients, or updated parameters) is divergence.
    auto run_step = [&] {
      if (rc.objective == Objective::Sft) {
        Tensor main_sum, mtp_sum;
        for (int64_t idx : batch) {
          SftTerms terms = record_sft_terms(train_recs[static_cast<size_t>(idx)], rc.model, w);
          tokens += terms.tokens;
          main_sum = main_sum.defined() ? add(main_sum, terms.main) : terms.main;
          if (terms.mtp)
            mtp_sum = mtp_sum.defined() ? add(mtp_sum, *terms.mtp) : *terms.mtp;
        }
        Tensor main_avg = mul_scalar(main_sum, inv_b);
        loss_main = main_avg.item();
        loss = main_avg;
        if (mtp_sum.defined()) {
          Tensor mtp_avg = mul_scalar(mtp_sum, inv_b);
          loss_mtp = mtp_avg.item();
          loss = add(loss, mul_scalar(mtp_avg, rc.model.mtp_weight));
        }
      } else if (rc.objective == Objective::Dpo) {
        Tensor sum;
        for (int64_t idx : batch) {
          const SceneRecord& rec = train_recs[static_cast<size_t>(idx)];
          std::string rejected = corrupt_caption(rec.count_targets, corrupt_rng);
          CaptionSeq cseq = caption_seq(rec, rc.model, rec.caption);
          CaptionSeq rseq = caption_seq(rec, rc.model, rejected);
          tokens += cseq.seq.size() + rseq.seq.size();
          Tensor vis = image_embeds(rec.image, rc.model, w);
          PreferencePair pair;
          pair.chosen_policy = completion_logprobs(cseq.seq, cseq.completion_begin, vis, rc.model, w);
          pair.rejected_policy =
              completion_logprobs(rseq.seq, rseq.completion_begin, vis, rc.model, w);
          {
            NoGradGuard ng;
            auto cached = ref_vis_cache.find(idx);
            if (cached == ref_vis_cache.end())
              cached = ref_vis_cache.emplace(idx, image_embeds(rec.image, rc.model, ref_w)).first;
            pair.chosen_ref =
                completion_logprobs(cseq.seq, cseq.completion_begin, cached->second, rc.model, ref_w);
            pair.rejected_ref =
                completion_logprobs(rseq.seq, rseq.completion_begin, cached->second, rc.model, ref_w);
          }
          Tensor term = dpo_loss(pair, rc.loss);
          sum = sum.defined() ? add(sum, term) : term;
        }
        loss = mul_scalar(sum, inv_b);
        loss_main = loss.item();
      } else {  // Grouper and Grpo share the group construction
        std::vector<RewardGroup> groups;
        for (int64_t idx : batch) {
          const SceneRecord& rec = train_recs[static_cast<size_t>(idx)];
          RewardGroup g;
          Tensor vis = image_embeds(rec.image, rc.model, w);
          for (int64_t k = 0; k < group; ++k) {
            std::string candidate =
                k == 0 ? rec.caption : corrupt_caption(rec.count_targets, corrupt_rng);
            CaptionSeq cs = caption_seq(rec, rc.model, candidate);
            tokens += cs.seq.size();
            g.rewards.push_back(caption_reward(rec.caption, candidate));
            g.logprobs.push_back(
                completion_logprobs(cs.seq, cs.completion_begin, vis, rc.model, w));
          }
          groups.push_back(std::move(g));
        }
        if (rc.objective == Objective::Grouper) {
          Tensor sum;
          int64_t kept = 0;
          for (const RewardGroup& g : groups) {
            if (!grouper_advantages(g.rewards, rc.loss).has_value()) continue;  // degenerate
            Tensor term = grouper_loss(g, rc.loss);
            sum = sum.defined() ? add(sum, term) : term;
            ++kept;
          }
          require(kept > 0, Errc::EmptyBatch, "every group in the batch is degenerate");
          loss = mul_scalar(sum, 1.0 / static_cast<double>(kept));
          loss_main = loss.item();
        } else {
          loss = grpo_surrogate_loss(groups, rc.loss);  // summed over surviving groups
          loss_main = loss.item();
        }
      }
  
      lv = loss.item();
      require(std::isfinite(lv), Errc::DivergedLoss,
              "non-finite loss at step " + std::to_string(step));
      GradMap grads = grad(loss);
      opt.step(w, grads);
      for (const auto& [name, p] : w.params)
        for (int64_t i = 0; i < p.numel(); ++i)
          require(std::isfinite(p.data()[i]), Errc::DivergedLoss,
                  "parameter " + name + " diverged at step " + std::to_string(step));
    };
    try {
      run_step();
    } catch (const Error& e) {
      if (e.code() == Errc::InvalidValue)
        raise(Errc::DivergedLoss, "step " + std::to_string(step) + " diverged: " + e.what());
      throw;
    }

    MetricRecord m;
    m.step = step;
    m.objective = objective_name(rc.objective);
    m.loss = lv;
    m.loss_main = loss_main;
    m.loss_mtp = loss_mtp;
    if (timing) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      m.tokens_per_sec = secs > 0.0 ? static_cast<double>(tokens) / secs : 0.0;
    }
    if (step % rc.train.eval_every == 0 || step == rc.train.steps) {
      m.eval_accuracy = next_token_accuracy(eval_recs, rc.model, w);
      result.final_eval_accuracy = *m.eval_accuracy;
      if (log_on(LogLevel::Info))
        std::fprintf(stderr, "step %lld loss %.6f eval_accuracy %.4f\n",
                     static_cast<long long>(step), lv, *m.eval_accuracy);
    } else if (log_on(LogLevel::Debug)) {
      std::fprintf(stderr, "step %lld loss %.6f\n", static_cast<long long>(step), lv);
    }
    metrics << metric_to_json(m).dump() << "\n";
    metrics.flush();
    require(metrics.good(), Errc::IoError, "failed writing " + metrics_path);
    result.final_loss = lv;
    result.steps_run = step;
  }

  save_checkpoint(checkpoint_path, rc.model, w);
  result.checkpoint_path = checkpoint_path;
  result.metrics_path = metrics_path;
  return result;
}

}  // namespace exms
