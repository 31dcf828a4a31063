#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace sparseattn::cli {

using nlohmann::json;

enum class Format { Csv, Json };

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitInvariant = 4;

// Raised when a runtime invariant check fails inside a subcommand.
class InvariantViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Subcommand parameters bound to both a `--kebab-case` flag and a snake_case
// config key. Precedence: flag, then config file, then the field default.
class ParamRegistry {
 public:
  template <typename T>
  CLI::Option* add(CLI::App& app, const std::string& flag, T& field, const std::string& help) {
    CLI::Option* opt;
    if constexpr (std::is_same_v<T, bool>) {
      opt = app.add_flag("--" + flag, field, help);
    } else {
      opt = app.add_option("--" + flag, field, help);
      if constexpr (requires { field.push_back(field.front()); }) opt->delimiter(',');
    }
    entries_.push_back(Entry{
        key_of(flag), opt, [&field](const json& j) { field = j.get<T>(); }, [&field] { return json(field); }});
    return opt;
  }

  // Fills fields whose flag was not given from `config`. Unknown keys and
  // type mismatches throw ConfigError.
  void apply_config(const json& config) const;
  json resolved() const;

  static std::string key_of(const std::string& flag);

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<void(const json&)> load;
    std::function<json()> dump;
  };
  std::vector<Entry> entries_;
};

// A table cell is a JSON scalar; doubles are rendered in shortest
// round-trip form in CSV.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<json>> rows;

  void add_row(std::vector<json> row);
};

struct RunContext {
  std::filesystem::path out;
  Format format = Format::Csv;
  std::uint64_t seed = 0;
  std::ostream& log;
  std::ostream& err;

  std::filesystem::path path(const std::string& name) const { return out / name; }
  // Always writes <stem>.csv; with --format json also writes <stem>.json.
  void write_table(const std::string& stem, const Table& table) const;
  void write_json(const std::string& name, const json& value) const;
  void write_text(const std::string& name, const std::string& text) const;
};

class Command {
 public:
  virtual ~Command() = default;

  // Registers the subcommand, its common flags and its parameters.
  void attach(CLI::App& root);
  bool selected() const { return app_ != nullptr && app_->parsed(); }
  // Resolves config, prepares the output directory, writes the manifest and
  // runs the command.
  int run(std::ostream& log, std::ostream& err);

  virtual std::string name() const = 0;
  virtual std::string description() const = 0;

 protected:
  virtual void declare(CLI::App& app, ParamRegistry& params) = 0;
  // Called after config resolution; throws ConfigError on bad values.
  virtual void validate() const {}
  virtual int execute(RunContext& ctx) = 0;

 private:
  CLI::App* app_ = nullptr;
  ParamRegistry params_;
  std::uint64_t seed_ = 0;
  std::string out_;
  std::string format_ = "csv";
  std::string config_path_;
  CLI::Option* seed_opt_ = nullptr;
  CLI::Option* format_opt_ = nullptr;
};

std::unique_ptr<Command> make_mask_analyze();
std::unique_ptr<Command> make_attn_bench();
std::unique_ptr<Command> make_case_repro();
std::unique_ptr<Command> make_distill_train();

// Entry point shared by the executable and the tests. args[0] is the
// program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

json read_json_file(const std::filesystem::path& path);
std::string utc_timestamp();

}  // namespace sparseattn::cli
