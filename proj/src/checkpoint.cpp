#include "exms/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace exms {

namespace {

constexpr char kMagic[4] = {'E', 'X', 'M', 'S'};

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["vocab_size"] = cfg.vocab_size;
  j["d_model"] = cfg.d_model;
  j["n_layers_enc"] = cfg.n_layers_enc;
  j["n_layers_dec"] = cfg.n_layers_dec;
  j["n_heads"] = cfg.n_heads;
  j["n_kv_heads"] = cfg.n_kv_heads;
  j["head_dim"] = cfg.head_dim;
  j["d_ff"] = cfg.d_ff;
  j["patch_size"] = cfg.patch_size;
  j["merge_factor"] = cfg.merge_factor;
  j["max_image_side"] = cfg.max_image_side;
  j["mtp_enabled"] = cfg.mtp_enabled;
  j["mtp_weight"] = cfg.mtp_weight;
  if (cfg.window)
    j["window"] = *cfg.window;
  else
    j["window"] = nullptr;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::ConfigError, "model config must be a JSON object");
  static const char* known[] = {"vocab_size", "d_model",      "n_layers_enc",   "n_layers_dec",
                                "n_heads",    "n_kv_heads",   "head_dim",       "d_ff",
                                "patch_size", "merge_factor", "max_image_side", "mtp_enabled",
                                "mtp_weight", "window"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    require(ok, Errc::ConfigError, "unknown model config key '" + it.key() + "'");
  }
  auto need = [&](const char* key) -> const nlohmann::json& {
    require(j.contains(key), Errc::ConfigError, std::string("model config missing '") + key + "'");
    return j.at(key);
  };
  auto as_int = [&](const char* key) -> int64_t {
    const nlohmann::json& v = need(key);
    require(v.is_number_integer(), Errc::ConfigError, std::string(key) + " must be an integer");
    return v.get<int64_t>();
  };
  ModelConfig cfg;
  cfg.vocab_size = as_int("vocab_size");
  cfg.d_model = as_int("d_model");
  cfg.n_layers_enc = as_int("n_layers_enc");
  cfg.n_layers_dec = as_int("n_layers_dec");
  cfg.n_heads = as_int("n_heads");
  cfg.n_kv_heads = as_int("n_kv_heads");
  cfg.head_dim = as_int("head_dim");
  cfg.d_ff = as_int("d_ff");
  cfg.patch_size = as_int("patch_size");
  cfg.merge_factor = as_int("merge_factor");
  cfg.max_image_side = as_int("max_image_side");
  const nlohmann::json& mtp = need("mtp_enabled");
  require(mtp.is_boolean(), Errc::ConfigError, "mtp_enabled must be a boolean");
  cfg.mtp_enabled = mtp.get<bool>();
  const nlohmann::json& mw = need("mtp_weight");
  require(mw.is_number(), Errc::ConfigError, "mtp_weight must be a number");
  cfg.mtp_weight = mw.get<double>();
  const nlohmann::json& win = need("window");
  if (win.is_null()) {
    cfg.window.reset();
  } else {
    require(win.is_number_integer(), Errc::ConfigError, "window must be an integer or null");
    cfg.window = win.get<int64_t>();
  }
  validate(cfg);
  return cfg;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Weights& w) {
  validate(cfg);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["config"] = model_config_to_json(cfg);
  nlohmann::json params = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : w.params) {  // std::map: already name-sorted
    nlohmann::json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["offset"] = offset;
    params.push_back(std::move(p));
    offset += static_cast<uint64_t>(t.numel()) * sizeof(double);
  }
  manifest["params"] = std::move(params);
  std::string mbytes = manifest.dump();

  std::string header;
  header.append(kMagic, 4);
  put_u32(header, kCheckpointVersion);
  put_u64(header, mbytes.size());

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), Errc::IoError, "cannot open " + path + " for writing");
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  for (const auto& [name, t] : w.params)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(double))));
  f.flush();
  require(f.good(), Errc::IoError, "failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), Errc::IoError, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(!f.bad(), Errc::IoError, "failed reading " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  require(bytes.size() >= 16, Errc::FormatError, "checkpoint too short for its header");
  require(std::memcmp(p, kMagic, 4) == 0, Errc::FormatError, "bad checkpoint magic");
  uint32_t version = get_u32(p + 4);
  require(version == kCheckpointVersion, Errc::FormatError,
          "unsupported checkpoint version " + std::to_string(version));
  uint64_t mlen = get_u64(p + 8);
  require(bytes.size() >= 16 + mlen, Errc::FormatError, "manifest extends past end of file");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::FormatError, std::string("bad manifest JSON: ") + e.what());
  }
  require(manifest.is_object() && manifest.contains("format_version") &&
              manifest.contains("config") && manifest.contains("params"),
          Errc::FormatError, "manifest missing required keys");
  require(manifest["format_version"].is_number_integer() &&
              manifest["format_version"].get<uint32_t>() == kCheckpointVersion,
          Errc::FormatError, "manifest format_version mismatch");
  Checkpoint ckpt;
  ckpt.config = model_config_from_json(manifest["config"]);
  const nlohmann::json& params = manifest["params"];
  require(params.is_array(), Errc::FormatError, "manifest params must be an array");
  size_t payload_base = 16 + static_cast<size_t>(mlen);
  size_t payload_size = bytes.size() - payload_base;
  uint64_t expect_offset = 0;
  std::string prev_name;
  for (const nlohmann::json& pj : params) {
    require(pj.is_object() && pj.contains("name") && pj.contains("shape") && pj.contains("offset"),
            Errc::FormatError, "param entry missing name/shape/offset");
    std::string name = pj["name"].get<std::string>();
    require(prev_name.empty() || prev_name < name, Errc::FormatError,
            "param entries must be strictly name-sorted");
    prev_name = name;
    Shape shape;
    for (const nlohmann::json& d : pj["shape"]) {
      require(d.is_number_integer(), Errc::FormatError, "param shape must be integers");
      shape.push_back(d.get<int64_t>());
    }
    uint64_t offset = pj["offset"].get<uint64_t>();
    require(offset == expect_offset, Errc::FormatError, "param offsets must be contiguous");
    int64_t numel = shape_numel(shape);
    uint64_t nbytes = static_cast<uint64_t>(numel) * sizeof(double);
    require(offset + nbytes <= payload_size, Errc::FormatError,
            "param '" + name + "' extends past end of file");
    std::vector<double> data(static_cast<size_t>(numel));
    std::memcpy(data.data(), bytes.data() + payload_base + offset, static_cast<size_t>(nbytes));
    ckpt.weights.params.emplace(name, Tensor(shape, std::move(data), /*requires_grad=*/true));
    expect_offset = offset + nbytes;
  }
  require(expect_offset == payload_size, Errc::FormatError, "trailing bytes after last param");
  return ckpt;
}

}  // namespace exms
