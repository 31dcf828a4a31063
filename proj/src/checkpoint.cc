#include "sparseattn/checkpoint.h"

#include <fstream>
#include <set>
#include <string>

#include "sparseattn/errors.h"
#include "sparseattn/tensor_io.h"

namespace sparseattn {
namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(what + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(what + ": bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

json to_json(const DenoiserConfig& a) {
  return json{{"tokens", a.tokens},         {"channels", a.channels},   {"d_model", a.d_model},
              {"n_layers", a.n_layers},     {"n_heads", a.n_heads},     {"mlp_hidden", a.mlp_hidden},
              {"time_features", a.time_features}, {"n_classes", a.n_classes}};
}

json to_json(const SparsityConfig& c) {
  return json{{"k_frac", c.k_frac}, {"p_frac", c.p_frac}, {"b_q", c.b_q}, {"b_kv", c.b_kv}};
}

json to_json(const AttentionMode& m) {
  json j{{"kind", m.sparse ? "sparse" : "dense"}};
  if (m.sparse) j["sparsity"] = to_json(m.cfg);
  return j;
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  const std::string what = "architecture";
  reject_unknown(j, {"tokens", "channels", "d_model", "n_layers", "n_heads", "mlp_hidden", "time_features", "n_classes"},
                 what);
  DenoiserConfig a;
  read_key(j, "tokens", a.tokens, what);
  read_key(j, "channels", a.channels, what);
  read_key(j, "d_model", a.d_model, what);
  read_key(j, "n_layers", a.n_layers, what);
  read_key(j, "n_heads", a.n_heads, what);
  read_key(j, "mlp_hidden", a.mlp_hidden, what);
  read_key(j, "time_features", a.time_features, what);
  read_key(j, "n_classes", a.n_classes, what);
  a.validate();
  return a;
}

SparsityConfig sparsity_config_from_json(const json& j) {
  const std::string what = "sparsity";
  reject_unknown(j, {"k_frac", "p_frac", "b_q", "b_kv"}, what);
  SparsityConfig c;
  read_key(j, "k_frac", c.k_frac, what);
  read_key(j, "p_frac", c.p_frac, what);
  read_key(j, "b_q", c.b_q, what);
  read_key(j, "b_kv", c.b_kv, what);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

AttentionMode attention_mode_from_json(const json& j) {
  reject_unknown(j, {"kind", "sparsity"}, "attention mode");
  std::string kind = "dense";
  read_key(j, "kind", kind, "attention mode");
  if (kind == "dense") return AttentionMode::dense();
  if (kind == "sparse") {
    return AttentionMode::sparse_with(j.contains("sparsity") ? sparsity_config_from_json(j.at("sparsity"))
                                                             : SparsityConfig{});
  }
  throw ConfigError("attention mode: kind must be 'dense' or 'sparse'");
}

void save_checkpoint(const std::filesystem::path& dir, const DenoiserModel& model, const CheckpointInfo& info) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  json params = json::array();
  model.params.for_each([&](const std::string& name, const Tensor& t) {
    save_spt2(dir / "params" / (name + ".spt2"), t);
    params.push_back(json{{"name", name}, {"shape", t.dims()}});
  });
  const json manifest{{"format_version", kFormatVersion},
                      {"architecture", to_json(model.arch)},
                      {"attn_mode", to_json(model.mode)},
                      {"step", info.step},
                      {"seed", info.seed},
                      {"params", params}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + (dir / "manifest.json").string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format_version", 0) != kFormatVersion) throw IoError("unsupported checkpoint format version");
  LoadedCheckpoint ck;
  ck.model.arch = denoiser_config_from_json(manifest.at("architecture"));
  ck.model.mode = attention_mode_from_json(manifest.at("attn_mode"));
  ck.info.step = manifest.value("step", std::size_t{0});
  ck.info.seed = manifest.value("seed", std::uint64_t{0});

  // Shapes come from a fresh init so a truncated parameter set is detected.
  Rng shape_rng(0);
  ck.model.params = init_params(ck.model.arch, shape_rng);
  std::size_t count = 0;
  ck.model.params.for_each([&](const std::string& name, Tensor& t) {
    Tensor loaded = load_spt2(dir / "params" / (name + ".spt2"));
    if (!loaded.same_shape(t)) throw IoError("checkpoint tensor " + name + " has the wrong shape");
    t = std::move(loaded);
    ++count;
  });
  if (manifest.contains("params") && manifest.at("params").size() != count) {
    throw IoError("checkpoint manifest lists a different parameter set");
  }
  return ck;
}

}  // namespace sparseattn
