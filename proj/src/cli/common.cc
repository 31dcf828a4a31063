#include "cli/common.h"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "sparseattn/errors.h"
#include "sparseattn/tensor_io.h"

namespace sparseattn::cli {
namespace {

std::string csv_cell(const json& v) {
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  if (v.is_null()) return "";
  return v.dump();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

std::string ParamRegistry::key_of(const std::string& flag) {
  std::string key = flag;
  for (char& c : key) {
    if (c == '-') c = '_';
  }
  return key;
}

void ParamRegistry::apply_config(const json& config) const {
  if (!config.is_object()) throw ConfigError("config file must hold a JSON object");
  std::set<std::string> known = {"seed", "format"};
  for (const auto& e : entries_) known.insert(e.key);
  for (auto it = config.begin(); it != config.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
  }
  for (const auto& e : entries_) {
    if (e.opt->count() > 0 || !config.contains(e.key)) continue;
    try {
      e.load(config.at(e.key));
    } catch (const json::exception& ex) {
      throw ConfigError("bad value for config key '" + e.key + "': " + ex.what());
    }
  }
}

json ParamRegistry::resolved() const {
  json j = json::object();
  for (const auto& e : entries_) j[e.key] = e.dump();
  return j;
}

void Table::add_row(std::vector<json> row) {
  if (row.size() != columns.size()) throw ShapeError("table row has the wrong number of cells");
  rows.push_back(std::move(row));
}

void RunContext::write_table(const std::string& stem, const Table& table) const {
  std::ostringstream csv;
  for (std::size_t c = 0; c < table.columns.size(); ++c) csv << (c ? "," : "") << table.columns[c];
  csv << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) csv << (c ? "," : "") << csv_cell(row[c]);
    csv << '\n';
  }
  write_file(path(stem + ".csv"), csv.str());
  if (format == Format::Json) {
    json rows = json::array();
    for (const auto& row : table.rows) {
      json obj = json::object();
      for (std::size_t c = 0; c < row.size(); ++c) obj[table.columns[c]] = row[c];
      rows.push_back(std::move(obj));
    }
    write_json(stem + ".json", json{{"columns", table.columns}, {"rows", rows}});
  }
}

void RunContext::write_json(const std::string& name, const json& value) const {
  write_file(path(name), value.dump(2) + "\n");
}

void RunContext::write_text(const std::string& name, const std::string& text) const { write_file(path(name), text); }

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void Command::attach(CLI::App& root) {
  app_ = root.add_subcommand(name(), description());
  seed_opt_ = app_->add_option("--seed", seed_, "Master RNG seed");
  app_->add_option("--out", out_, "Output directory (must not already hold a run)")->required();
  format_opt_ = app_->add_option("--format", format_, "Report format")->check(CLI::IsMember({"csv", "json"}));
  app_->add_option("--config", config_path_, "JSON config file; flags override its values");
  declare(*app_, params_);
}

int Command::run(std::ostream& log, std::ostream& err) {
  if (!config_path_.empty()) {
    const json config = read_json_file(config_path_);
    params_.apply_config(config);
    try {
      if (seed_opt_->count() == 0 && config.contains("seed")) seed_ = config.at("seed").get<std::uint64_t>();
      if (format_opt_->count() == 0 && config.contains("format")) format_ = config.at("format").get<std::string>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad seed/format in config: ") + e.what());
    }
  }
  if (format_ != "csv" && format_ != "json") throw ConfigError("format must be csv or json");
  validate();

  const std::filesystem::path out(out_);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  if (std::filesystem::exists(out / "manifest.json")) {
    throw IoError("output directory " + out.string() + " already holds a run");
  }

  json config = params_.resolved();
  config["seed"] = seed_;
  config["format"] = format_;
  const json manifest{{"subcommand", name()},
                      {"version", SPARSEATTN_VERSION},
                      {"timestamp", utc_timestamp()},
                      {"config", config}};
  RunContext ctx{out, format_ == "json" ? Format::Json : Format::Csv, seed_, log, err};
  ctx.write_json("manifest.json", manifest);
  return execute(ctx);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("Block-sparse attention lab: masking analysis, kernels, benchmarks and distillation",
               args.empty() ? "sparseattn-lab" : args.front());
  app.set_version_flag("--version", SPARSEATTN_VERSION);
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> commands;
  commands.push_back(make_mask_analyze());
  commands.push_back(make_attn_bench());
  commands.push_back(make_case_repro());
  commands.push_back(make_distill_train());
  for (auto& c : commands) c->attach(app);

  std::vector<std::string> rest(args.empty() ? args.begin() : args.begin() + 1, args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (auto& c : commands) {
    if (!c->selected()) continue;
    try {
      return c->run(out, err);
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const IoError& e) {
      err << "error: " << e.what() << '\n';
      return kExitIo;
    } catch (const NumericError& e) {
      err << "error: " << e.what() << '\n';
      return kExitNumeric;
    } catch (const InvariantViolation& e) {
      err << "invariant violated: " << e.what() << '\n';
      return kExitInvariant;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitInvariant;
    }
  }
  return kExitUsage;
}

}  // namespace sparseattn::cli
