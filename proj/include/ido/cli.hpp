#pragma once

// Experiment harness behind the `ido` binary: INI-style configs, experiment
// construction for the three problem presets, checkpoints, CSV output and the
// train / eval / reference / study commands.
//
// Every key read from the config is recorded with its resolved value; keys
// that nothing read are rejected, and the resolved set is echoed next to the
// outputs so a run can be repeated from the echo alone.

#include "ido/approx.hpp"
#include "ido/losses.hpp"
#include "ido/metrics.hpp"
#include "ido/optim.hpp"
#include "ido/problems.hpp"
#include "ido/reference.hpp"
#include "ido/sde.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ido::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNumericalAbort = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Formatting

/// Shortest round-trip decimal form; locale independent. NaN -> "nan".
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string fmt(std::size_t x) { return std::to_string(x); }

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    if (s == "nan") return std::nan("");
    return std::nullopt;
  }
  return v;
}

inline std::optional<std::uint64_t> parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const char* end = s.data() + s.size();
  int base = 10;
  const char* begin = s.data();
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    begin += 2;
  }
  auto res = std::from_chars(begin, end, v, base);
  if (res.ec != std::errc() || res.ptr != end || begin == end) return std::nullopt;
  return v;
}

// ---------------------------------------------------------------------------
// Config

/// Flat `[section]` + `key = value` file; `#` and `;` start comments.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& source) {
    Config c;
    c.source_ = source;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') c.fail(lineno, "malformed section header '" + line + "'");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) c.fail(lineno, "empty section name");
        c.sections_[section] = lineno;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) c.fail(lineno, "expected 'key = value', got '" + line + "'");
      if (section.empty()) c.fail(lineno, "key outside of any [section]");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) c.fail(lineno, "empty key");
      auto& slot = c.entries_[section + "." + key];
      if (slot.line) {
        c.fail(lineno, "duplicate key '" + key + "' in [" + section + "] (first set on line " +
                           std::to_string(slot.line) + ")");
      }
      slot = {value, lineno, false};
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path + ": cannot open config file");
    return parse(f, path);
  }

  static Config from_string(const std::string& text, const std::string& source = "<string>") {
    std::istringstream s(text);
    return parse(s, source);
  }

  bool has(const std::string& section, const std::string& key) const {
    return entries_.count(section + "." + key) > 0;
  }

  /// Raw value without marking the key as read.
  std::optional<std::string> peek(const std::string& section, const std::string& key) const {
    auto it = entries_.find(section + "." + key);
    if (it == entries_.end()) return std::nullopt;
    return it->second.value;
  }

  std::string str(const std::string& section, const std::string& key, std::optional<std::string> def = {}) {
    auto it = entries_.find(section + "." + key);
    std::string v;
    if (it == entries_.end()) {
      if (!def) throw ConfigError(source_ + ": missing required key '" + key + "' in [" + section + "]");
      v = *def;
    } else {
      it->second.used = true;
      v = it->second.value;
    }
    record(section, key, v);
    return v;
  }

  /// One of `allowed`.
  std::string choice(const std::string& section, const std::string& key, const std::vector<std::string>& allowed,
                     std::optional<std::string> def = {}) {
    const std::string v = str(section, key, def);
    for (const auto& a : allowed) {
      if (a == v) return v;
    }
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    bad(section, key, "'" + v + "' is not one of: " + list);
  }

  double number(const std::string& section, const std::string& key, std::optional<double> def = {}) {
    const std::string raw = str(section, key, def ? std::optional<std::string>(fmt(*def)) : std::nullopt);
    const auto v = parse_double(raw);
    if (!v || !std::isfinite(*v)) bad(section, key, "'" + raw + "' is not a finite number");
    return *v;
  }

  double positive(const std::string& section, const std::string& key, std::optional<double> def = {}) {
    const double v = number(section, key, def);
    if (!(v > 0.0)) bad(section, key, "must be positive");
    return v;
  }

  std::uint64_t uint(const std::string& section, const std::string& key, std::optional<std::uint64_t> def = {}) {
    const std::string raw = str(section, key, def ? std::optional<std::string>(std::to_string(*def)) : std::nullopt);
    const auto v = parse_uint(raw);
    if (!v) bad(section, key, "'" + raw + "' is not a non-negative integer");
    return *v;
  }

  std::size_t count(const std::string& section, const std::string& key, std::optional<std::size_t> def = {},
                    std::size_t min = 0) {
    const auto v = static_cast<std::size_t>(uint(section, key, def));
    if (v < min) bad(section, key, "must be at least " + std::to_string(min));
    return v;
  }

  bool flag(const std::string& section, const std::string& key, std::optional<bool> def = {}) {
    const std::string v =
        str(section, key, def ? std::optional<std::string>(*def ? "true" : "false") : std::nullopt);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad(section, key, "'" + v + "' is not a boolean (true/false)");
  }

  std::vector<double> numbers(const std::string& section, const std::string& key,
                              std::optional<std::string> def = {}) {
    const std::string raw = str(section, key, def);
    std::vector<double> out;
    for (const auto& item : split_list(raw)) {
      const auto v = parse_double(item);
      if (!v || !std::isfinite(*v)) bad(section, key, "'" + item + "' is not a finite number");
      out.push_back(*v);
    }
    return out;
  }

  std::vector<std::size_t> counts(const std::string& section, const std::string& key,
                                  std::optional<std::string> def = {}) {
    const std::string raw = str(section, key, def);
    std::vector<std::size_t> out;
    for (const auto& item : split_list(raw)) {
      const auto v = parse_uint(item);
      if (!v) bad(section, key, "'" + item + "' is not a non-negative integer");
      out.push_back(static_cast<std::size_t>(*v));
    }
    return out;
  }

  std::vector<std::string> words(const std::string& section, const std::string& key,
                                 std::optional<std::string> def = {}) {
    return split_list(str(section, key, def));
  }

  /// Rejects every key that no reader consumed.
  void reject_unused() const {
    for (const auto& [name, e] : entries_) {
      if (e.used) continue;
      const auto dot = name.find('.');
      std::string msg = source_ + ":" + std::to_string(e.line) + ": unknown key '" + name.substr(dot + 1) +
                        "' in [" + name.substr(0, dot) + "]";
      if (!sections_known(name.substr(0, dot))) msg += " (unknown section)";
      throw ConfigError(msg);
    }
  }

  /// Every key read so far with its effective value, in reading order.
  std::string resolved() const {
    std::ostringstream s;
    for (std::size_t i = 0; i < order_.size(); ++i) {
      if (i) s << "\n";
      s << "[" << order_[i] << "]\n";
      for (const auto& [k, v] : resolved_.at(order_[i])) s << k << " = " << v << "\n";
    }
    return s.str();
  }

  [[noreturn]] void bad(const std::string& section, const std::string& key, const std::string& why) const {
    auto it = entries_.find(section + "." + key);
    const std::string where = it == entries_.end() ? source_ : source_ + ":" + std::to_string(it->second.line);
    throw ConfigError(where + ": key '" + key + "' in [" + section + "]: " + why);
  }

  const std::string& source() const { return source_; }

 private:
  struct Entry {
    std::string value;
    int line = 0;
    bool used = false;
  };

  [[noreturn]] void fail(int line, const std::string& why) const {
    throw ConfigError(source_ + ":" + std::to_string(line) + ": " + why);
  }

  bool sections_known(const std::string& s) const {
    for (const char* k : {"problem", "control", "loss", "optimizer", "train", "eval", "reference", "study", "output"}) {
      if (s == k) return true;
    }
    return false;
  }

  void record(const std::string& section, const std::string& key, const std::string& value) {
    auto& keys = resolved_[section];
    if (keys.empty()) order_.push_back(section);
    for (auto& kv : keys) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    keys.emplace_back(key, value);
  }

  std::string source_;
  std::map<std::string, Entry> entries_;
  std::map<std::string, int> sections_;
  std::vector<std::string> order_;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> resolved_;
};

// ---------------------------------------------------------------------------
// CSV

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
      : out_(path), columns_(header.size()) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    write(header);
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw std::logic_error("CSV row has the wrong number of columns");
    write(cells);
  }

 private:
  void write(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
    out_.flush();
  }

  std::ofstream out_;
  std::size_t columns_;
};

inline const std::vector<std::string>& train_columns() {
  static const std::vector<std::string> c = {"iteration", "loss", "grad_norm", "isre", "l2_error", "wall_ms",
                                             "skipped",   "y0"};
  return c;
}

inline std::vector<std::string> train_row(const TrainRecord& r) {
  return {fmt(r.iteration), fmt(r.loss),    fmt(r.grad_norm),        fmt(r.isre),
          fmt(r.l2_error),  fmt(r.wall_ms), r.skipped ? "1" : "0", fmt(r.y0)};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   ido-checkpoint 1
//   kind <feed_forward|dense_net|time_linear>
//   dim <d>
//   activation <tanh|relu>           (networks)
//   hidden <w1,w2,...>               (networks)
//   grid <horizon> <dt>              (time_linear)
//   iteration <j>
//   y0 <value>
//   params <p>
//   <p lines, one value each>
//   adam <steps> <skipped>
//   <p lines "m v">
//
// Values use the shortest round-trip decimal form, so reading a checkpoint
// back reproduces the parameters bitwise.

struct Checkpoint {
  ControlField control;
  std::size_t iteration = 0;
  double y0 = 0.0;
  OptimizerState opt;
};

inline void write_checkpoint(const std::filesystem::path& path, const ControlField& u, std::size_t iteration,
                             double y0, const OptimizerState& opt) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "ido-checkpoint 1\n";
  f << "kind " << to_string(u.kind()) << "\n";
  f << "dim " << u.dim() << "\n";
  if (u.kind() == ControlKind::time_linear) {
    f << "grid " << fmt(u.grid().horizon()) << " " << fmt(u.grid().dt) << "\n";
  } else {
    f << "activation " << to_string(u.activation()) << "\n";
    f << "hidden ";
    for (std::size_t i = 0; i < u.hidden().size(); ++i) f << (i ? "," : "") << u.hidden()[i];
    f << "\n";
  }
  f << "iteration " << iteration << "\n";
  f << "y0 " << fmt(y0) << "\n";
  f << "params " << u.size() << "\n";
  for (Eigen::Index i = 0; i < u.params().size(); ++i) f << fmt(u.params()(i)) << "\n";
  const bool moments = opt.m.size() == u.params().size() || opt.m.size() == u.params().size() + 1;
  const Eigen::Index pm = moments ? opt.m.size() : 0;
  f << "adam " << opt.steps << " " << opt.skipped << " " << pm << "\n";
  for (Eigen::Index i = 0; i < pm; ++i) f << fmt(opt.m(i)) << " " << fmt(opt.v(i)) << "\n";
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string() + ": cannot open checkpoint");
  auto fail = [&](const std::string& why) -> void {
    throw ConfigError(path.string() + ": malformed checkpoint: " + why);
  };
  std::string word;
  int version = 0;
  if (!(f >> word >> version) || word != "ido-checkpoint" || version != 1) fail("bad header");
  std::string kind_s, act_s = "tanh", hidden_s;
  std::size_t dim = 0, iteration = 0, p = 0;
  double y0 = 0.0, horizon = 0.0, dt = 0.0;
  auto expect = [&](const char* key) {
    if (!(f >> word) || word != key) fail(std::string("expected '") + key + "'");
  };
  expect("kind");
  f >> kind_s;
  expect("dim");
  f >> dim;
  ControlKind kind{};
  try {
    kind = parse_control_kind(kind_s);
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  std::string tok;
  if (kind == ControlKind::time_linear) {
    expect("grid");
    f >> tok;
    horizon = parse_double(tok).value_or(0.0);
    f >> tok;
    dt = parse_double(tok).value_or(0.0);
  } else {
    expect("activation");
    f >> act_s;
    expect("hidden");
    f >> hidden_s;
  }
  expect("iteration");
  f >> iteration;
  expect("y0");
  f >> tok;
  y0 = parse_double(tok).value_or(std::nan(""));
  expect("params");
  f >> p;
  if (!f) fail("truncated header");
  auto control = [&]() -> ControlField {
    try {
      if (kind == ControlKind::time_linear) return ControlField::time_linear(dim, TimeGrid::make(horizon, dt));
      std::vector<std::size_t> hidden;
      for (const auto& w : split_list(hidden_s)) hidden.push_back(static_cast<std::size_t>(parse_uint(w).value_or(0)));
      const Activation act = parse_activation(act_s);
      return kind == ControlKind::dense_net ? ControlField::dense_net(dim, hidden, act)
                                            : ControlField::feed_forward(dim, hidden, act);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path.string() + ": malformed checkpoint: " + e.what());
    }
  }();
  if (control.size() != p) {
    fail("header describes " + std::to_string(control.size()) + " parameters, file lists " + std::to_string(p));
  }
  Vector theta(static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < p; ++i) {
    if (!(f >> tok)) fail("truncated parameter list");
    const auto v = parse_double(tok);
    if (!v) fail("bad parameter '" + tok + "'");
    theta(static_cast<Eigen::Index>(i)) = *v;
  }
  control.unpack(theta);
  Checkpoint c{std::move(control), iteration, y0, {}};
  std::size_t pm = 0;
  expect("adam");
  f >> c.opt.steps >> c.opt.skipped >> pm;
  if (!f) fail("truncated optimizer state");
  if (pm) {
    c.opt.m.resize(static_cast<Eigen::Index>(pm));
    c.opt.v.resize(static_cast<Eigen::Index>(pm));
    for (std::size_t i = 0; i < pm; ++i) {
      std::string a, b;
      if (!(f >> a >> b)) fail("truncated optimizer moments");
      c.opt.m(static_cast<Eigen::Index>(i)) = parse_double(a).value_or(std::nan(""));
      c.opt.v(static_cast<Eigen::Index>(i)) = parse_double(b).value_or(std::nan(""));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Experiment

struct EvalSettings {
  std::string control = "checkpoint";  // checkpoint | optimal | zero | init
  std::string checkpoint;             // empty: <output dir>/checkpoint.txt
  std::size_t paths = 100000;
  std::uint64_t seed = 0xE7A1;
  TimeGrid grid;
  std::vector<std::size_t> crossing;
  std::size_t workers = 1;
};

struct ReferenceSettings {
  FdOptions fd;
  std::size_t fd_stride_x = 10;
  std::size_t fd_stride_t = 10;
  std::size_t riccati_steps = 1000;
  std::size_t samples = 101;  // time samples for the analytic u* table
};

struct StudySettings {
  std::string kind = "tensorisation";
  // tensorisation
  std::vector<std::size_t> copies;
  std::vector<Divergence> divergences;
  // shared
  std::size_t paths = 10000;
  std::size_t reps = 20;
  std::uint64_t seed = 0x57D;
  TimeGrid grid;
  // grad_variance
  std::vector<LossKind> losses;
  std::size_t iterations = 0;
  std::size_t every = 1;
  double floor = 0.01;
  std::size_t window = 30;
  std::vector<Eigen::Index> components;
  // y0_sweep
  std::vector<std::string> y0_values;
  double target_l2 = 0.01;
};

struct Experiment {
  std::string preset;
  SdeModel model;
  std::optional<OuLinearProblem> ou;
  std::optional<LqgProblem> lqg;
  std::optional<DoubleWellProblem> dw;
  ControlField control = ControlField::time_linear(1, TimeGrid::make(1.0, 1.0));  // replaced when built
  double y0 = 0.0;
  OptimizerState opt;
  TrainConfig train;
  std::string l2_reference = "auto";
  std::string resume;
  EvalSettings eval;
  ReferenceSettings reference;
  StudySettings study;
  std::filesystem::path out_dir;
  std::string resolved_config;
};

namespace detail {

inline Vector vector_of(Config& c, const std::string& section, const std::string& key, std::size_t d,
                        const std::string& def) {
  const std::vector<double> v = c.numbers(section, key, def);
  if (v.size() == 1) return Vector::Constant(static_cast<Eigen::Index>(d), v[0]);
  if (v.size() != d) {
    c.bad(section, key, "expects 1 or " + std::to_string(d) + " values, got " + std::to_string(v.size()));
  }
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(d));
}

inline TimeGrid grid_of(Config& c, const std::string& section, const std::string& key, double horizon,
                        std::optional<double> def) {
  const double dt = c.positive(section, key, def);
  try {
    return TimeGrid::make(horizon, dt);
  } catch (const std::invalid_argument& e) {
    c.bad(section, key, e.what());
  }
}

}  // namespace detail

/// The optimal / reference control of the preset, if one exists.
inline ControlFn optimal_control(const Experiment& e, const ReferenceSettings& ref) {
  if (e.ou) return ou_linear_control(*e.ou);
  if (e.lqg) {
    auto sol = std::make_shared<const RiccatiSolution>(
        riccati_solve(e.lqg->a, e.lqg->b, e.lqg->p, e.lqg->r, e.lqg->horizon, ref.riccati_steps));
    return lqg_control(sol, e.lqg->b);
  }
  if (e.dw && e.model.dim == 1) return fd_control(std::make_shared<const Grid1dValue>(hjb_fd_1d(e.model, ref.fd)));
  return ControlFn();
}

/// `command` is train, eval, reference or study; the study command requires
/// [study] kind, the others fall back to defaults for it.
inline Experiment build_experiment(Config& c, const std::string& command = "train") {
  Experiment e;
  // [problem]
  e.preset = c.choice("problem", "preset", {"ou_linear", "ou_quadratic", "double_well"});
  const bool y0_sweep = c.peek("study", "kind") == std::optional<std::string>("y0_sweep");
  const std::size_t d = c.count("problem", "dim", y0_sweep ? 20 : 1, 1);
  const double horizon = c.positive("problem", "horizon", 1.0);
  const auto di = static_cast<Eigen::Index>(d);
  Vector x_init;
  if (e.preset == "ou_linear" || e.preset == "ou_quadratic") {
    const double nu = c.number("problem", "perturbation", 0.1);
    if (nu < 0.0) c.bad("problem", "perturbation", "must be >= 0");
    const std::uint64_t pseed = c.uint("problem", "problem_seed", 1);
    auto [a, b] = perturbed_ou_matrices(d, nu, pseed);
    x_init = detail::vector_of(c, "problem", "x_init", d, "0");
    if (e.preset == "ou_linear") {
      OuLinearProblem p;
      p.a = a;
      p.b = b;
      p.gamma = detail::vector_of(c, "problem", "gamma", d, "1");
      p.horizon = horizon;
      p.x_init = x_init;
      e.model = ou_linear_model(p);
      e.ou = p;
    } else {
      LqgProblem q;
      q.a = a;
      q.b = b;
      q.p = c.number("problem", "running_scale", 0.5) * Dense::Identity(di, di);
      q.r = c.number("problem", "terminal_scale", 1.0) * Dense::Identity(di, di);
      if (q.p(0, 0) < 0.0) c.bad("problem", "running_scale", "must be >= 0");
      q.horizon = horizon;
      q.x_init = x_init;
      e.model = lqg_model(q);
      e.lqg = q;
    }
  } else {
    const std::vector<double> kappa = c.numbers("problem", "kappa", "5");
    const std::vector<double> nu = c.numbers("problem", "nu", "3");
    const std::size_t meta = c.count("problem", "metastable", d);
    DoubleWellProblem p;
    if (kappa.size() == 1 && nu.size() == 1) {
      p = DoubleWellProblem::standard(d, kappa[0], nu[0], meta, horizon);
    } else {
      p = DoubleWellProblem::standard(d, 1.0, 1.0, 0, horizon);
      if (kappa.size() != d || nu.size() != d) {
        c.bad("problem", "kappa", "kappa and nu need 1 or " + std::to_string(d) + " values each");
      }
      p.kappa = Eigen::Map<const Vector>(kappa.data(), di);
      p.nu = Eigen::Map<const Vector>(nu.data(), di);
    }
    p.b = c.positive("problem", "diffusion", 1.0) * Dense::Identity(di, di);
    p.x_init = detail::vector_of(c, "problem", "x_init", d, "-1");
    x_init = p.x_init;
    e.model = double_well_model(p);
    e.dw = p;
  }
  const double start_std = c.number("problem", "x_init_std", 0.0);
  if (start_std < 0.0) c.bad("problem", "x_init_std", "must be >= 0");
  if (start_std > 0.0) e.model.initial_sampler = gaussian_start(x_init, start_std);

  // [train] grid first: time_linear needs it
  e.train.grid = detail::grid_of(c, "train", "dt", horizon, 0.01);

  // [control]
  const ControlKind kind = parse_control_kind(c.choice("control", "kind", {"dense_net", "feed_forward", "time_linear"},
                                                       std::string(e.preset == "ou_quadratic" ? "time_linear" : "dense_net")));
  if (kind == ControlKind::time_linear) {
    e.control = ControlField::time_linear(d, e.train.grid);
  } else {
    const std::vector<std::size_t> hidden = c.counts("control", "hidden", "30,30");
    for (std::size_t w : hidden) {
      if (w == 0) c.bad("control", "hidden", "widths must be >= 1");
    }
    const Activation act = parse_activation(c.choice("control", "activation", {"relu", "tanh"}, "relu"));
    e.control = kind == ControlKind::dense_net ? ControlField::dense_net(d, hidden, act)
                                               : ControlField::feed_forward(d, hidden, act);
  }
  e.control.init(c.uint("control", "init_seed", 1));

  // [loss]
  {
    const std::string k = c.str("loss", "kind", "log_variance");
    try {
      e.train.loss.kind = parse_loss_kind(k);
    } catch (const std::invalid_argument&) {
      c.bad("loss", "kind", "'" + k + "' is not one of: log_variance, relative_entropy, cross_entropy, variance, moment");
    }
  }
  if (e.train.loss.kind != LossKind::relative_entropy) {
    e.train.loss.forward = parse_forward_policy(c.choice("loss", "forward", {"current_u", "zero"}, "current_u"));
  }
  if (e.train.loss.kind == LossKind::moment) e.y0 = c.number("loss", "y0", 0.0);
  e.train.loss_options.chunk = c.count("loss", "chunk", 0);
  if (e.train.loss.kind == LossKind::cross_entropy || e.train.loss.kind == LossKind::variance) {
    e.train.loss_options.max_exponent = c.number("loss", "max_exponent", 700.0);
  }

  // [optimizer]
  e.opt.kind = parse_optimizer(c.choice("optimizer", "kind", {"adam", "sgd"}, "adam"));
  e.opt.lr = c.positive("optimizer", "lr", 0.01);
  if (e.opt.kind == OptimizerKind::adam) {
    e.opt.beta1 = c.number("optimizer", "beta1", 0.9);
    e.opt.beta2 = c.number("optimizer", "beta2", 0.999);
    e.opt.eps = c.positive("optimizer", "eps", 1e-8);
    if (e.opt.beta1 < 0.0 || e.opt.beta1 >= 1.0) c.bad("optimizer", "beta1", "must lie in [0, 1)");
    if (e.opt.beta2 < 0.0 || e.opt.beta2 >= 1.0) c.bad("optimizer", "beta2", "must lie in [0, 1)");
  }

  // [train]
  e.train.batch = c.count("train", "batch", 200, needs_two_paths(e.train.loss.kind) ? 2 : 1);
  e.train.iterations = c.count("train", "iterations", 1000);
  e.train.seed = c.uint("train", "seed", 1);
  e.train.metric_every = c.count("train", "metric_every", 50);
  e.train.eval_paths = c.count("train", "eval_paths", 1000, 2);
  e.train.eval_seed = c.uint("train", "eval_seed", 0x5EEDE7A1ULL);
  e.train.isre = c.flag("train", "isre", true);
  e.l2_reference = c.choice("train", "l2_reference", {"auto", "none"}, "auto");
  e.resume = c.str("train", "resume", "");

  // [eval]
  e.eval.control = c.choice("eval", "control", {"checkpoint", "optimal", "zero", "init"}, "checkpoint");
  if (e.eval.control == "checkpoint") e.eval.checkpoint = c.str("eval", "checkpoint", "");
  e.eval.paths = c.count("eval", "paths", 100000, 2);
  e.eval.seed = c.uint("eval", "seed", 0xE7A1);
  e.eval.grid = detail::grid_of(c, "eval", "dt", horizon, e.train.grid.dt);
  e.eval.crossing = c.counts("eval", "crossing", "0");
  for (std::size_t k : e.eval.crossing) {
    if (k >= d) c.bad("eval", "crossing", "coordinate " + std::to_string(k) + " out of range for d=" + std::to_string(d));
  }
  e.eval.workers = c.count("eval", "workers", 1, 1);

  // [reference]
  if (e.dw) {
    e.reference.fd.x_lo = c.number("reference", "fd_x_lo", -3.0);
    e.reference.fd.x_hi = c.number("reference", "fd_x_hi", 3.0);
    e.reference.fd.nodes = c.count("reference", "fd_nodes", 2401, 3);
    e.reference.fd.time_steps = c.count("reference", "fd_time_steps", 1000, 1);
    e.reference.fd_stride_x = c.count("reference", "fd_stride_x", 10, 1);
    e.reference.fd_stride_t = c.count("reference", "fd_stride_t", 10, 1);
    if (!(e.reference.fd.x_hi > e.reference.fd.x_lo)) c.bad("reference", "fd_x_hi", "must exceed fd_x_lo");
  }
  if (e.lqg) e.reference.riccati_steps = c.count("reference", "riccati_steps", 1000, 1);
  if (e.ou) e.reference.samples = c.count("reference", "samples", 101, 2);

  // [study]
  StudySettings& s = e.study;
  s.kind = c.choice("study", "kind", {"tensorisation", "grad_variance", "y0_sweep"},
                    command == "study" ? std::nullopt : std::optional<std::string>("tensorisation"));
  s.seed = c.uint("study", "seed", 0x57D);
  if (s.kind == "tensorisation") {
    s.copies = c.counts("study", "copies", "1,2,4,8,16,32");
    for (std::size_t m : s.copies) {
      if (m == 0) c.bad("study", "copies", "copy counts must be >= 1");
    }
    for (const auto& w : c.words("study", "divergences", "log_variance,cross_entropy,relative_entropy,variance")) {
      try {
        s.divergences.push_back(parse_divergence(w));
      } catch (const std::invalid_argument& ex) {
        c.bad("study", "divergences", ex.what());
      }
    }
    s.paths = c.count("study", "paths", 10000, 2);
    s.reps = c.count("study", "reps", 20, 2);
    s.grid = detail::grid_of(c, "study", "dt", horizon, e.train.grid.dt);
  } else if (s.kind == "grad_variance") {
    for (const auto& w : c.words("study", "losses", "log_variance,relative_entropy")) {
      try {
        s.losses.push_back(parse_loss_kind(w));
      } catch (const std::invalid_argument& ex) {
        c.bad("study", "losses", ex.what());
      }
    }
    s.paths = c.count("study", "paths", e.train.batch, 2);
    s.reps = c.count("study", "reps", 20, 2);
    s.iterations = c.count("study", "iterations", 0);
    s.every = c.count("study", "every", 1, 1);
    s.floor = c.number("study", "floor", 0.01);
    s.window = c.count("study", "window", 30, 1);
    for (std::size_t k : c.counts("study", "components", "")) s.components.push_back(static_cast<Eigen::Index>(k));
  } else {
    s.y0_values = c.words("study", "y0_values", "free_energy,0,10");
    for (const auto& v : s.y0_values) {
      if (v != "free_energy" && !parse_double(v)) c.bad("study", "y0_values", "'" + v + "' is neither a number nor free_energy");
    }
    s.target_l2 = c.positive("study", "target_l2", 0.01);
  }

  // [output]
  e.out_dir = c.str("output", "dir");

  c.reject_unused();
  if (e.preset == "double_well" && d != 1 && e.eval.control == "optimal") {
    throw ConfigError(c.source() + ": eval control 'optimal' needs a reference solution; double_well has one only for dim = 1");
  }
  e.resolved_config = c.resolved();
  return e;
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline void prepare_output(const Experiment& e, const std::string& command) {
  std::filesystem::create_directories(e.out_dir);
  std::ofstream f(e.out_dir / (command + ".resolved.ini"));
  f << "# resolved configuration of `ido " << command << "`\n" << e.resolved_config;
}

inline ControlFn train_reference(const Experiment& e) {
  if (e.l2_reference == "none") return ControlFn();
  return optimal_control(e, e.reference);
}

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const NumericalError& ex) {
    err << "numerical abort: " << ex.what() << "\n";
    return kNumericalAbort;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kFailure;
  }
}

inline Experiment load(const std::string& path, const std::string& command) {
  Config c = Config::load(path);
  return build_experiment(c, command);
}

}  // namespace detail

/// Trains and writes train.csv, checkpoint.txt and train.resolved.ini.
inline int cmd_train(const std::string& config_path, std::ostream& log = std::cerr) {
  return detail::guarded(log, [&] {
    Experiment e = detail::load(config_path, "train");
    TrainState state{.control = e.control, .y0 = e.y0, .opt = e.opt};
    if (!e.resume.empty()) {
      Checkpoint ck = read_checkpoint(e.resume);
      if (!ck.control.same_architecture(state.control)) {
        throw ConfigError("checkpoint " + e.resume + " holds " + ck.control.describe() + ", config describes " +
                          state.control.describe());
      }
      state.control.unpack(ck.control.params());
      state.iteration = ck.iteration;
      state.y0 = ck.y0;
      state.opt.steps = ck.opt.steps;
      state.opt.skipped = ck.opt.skipped;
      state.opt.m = ck.opt.m;
      state.opt.v = ck.opt.v;
    }
    detail::prepare_output(e, "train");
    TrainConfig cfg = e.train;
    cfg.reference = detail::train_reference(e);
    CsvWriter csv(e.out_dir / "train.csv", train_columns());
    cfg.stop = [&](const TrainRecord& r) {
      csv.row(train_row(r));
      if (!std::isnan(r.isre) || !std::isnan(r.l2_error)) {
        log << "iteration " << r.iteration << " loss " << fmt(r.loss) << " isre " << fmt(r.isre) << " l2 "
            << fmt(r.l2_error) << "\n";
      }
      return false;
    };
    const TrainResult res = train(e.model, state, cfg);
    write_checkpoint(e.out_dir / "checkpoint.txt", state.control, state.iteration, state.y0, state.opt);
    if (res.abort_reason) {
      log << "numerical abort: " << *res.abort_reason << "\n";
      return int(kNumericalAbort);
    }
    return int(kOk);
  });
}

inline const std::vector<std::string>& eval_columns() {
  static const std::vector<std::string> c = {"control", "n",        "seed",     "isre",           "log_mean",
                                             "std_dev", "l2_error", "crossing_ratio"};
  return c;
}

/// Evaluates one control and writes eval.csv (one row).
inline int cmd_eval(const std::string& config_path, const std::string& checkpoint_override = "",
                    std::ostream& log = std::cerr) {
  return detail::guarded(log, [&] {
    Experiment e = detail::load(config_path, "eval");
    ControlFn u;
    std::string label = e.eval.control;
    if (e.eval.control == "checkpoint") {
      const std::string path = !checkpoint_override.empty() ? checkpoint_override
                               : !e.eval.checkpoint.empty() ? e.eval.checkpoint
                                                            : (e.out_dir / "checkpoint.txt").string();
      Checkpoint ck = read_checkpoint(path);
      if (!ck.control.same_architecture(e.control)) {
        throw ConfigError("checkpoint " + path + " holds " + ck.control.describe() + ", config describes " +
                          e.control.describe());
      }
      e.control.unpack(ck.control.params());
      u = e.control.bind_constant();
    } else if (e.eval.control == "init") {
      u = e.control.bind_constant();
    } else if (e.eval.control == "optimal") {
      u = optimal_control(e, e.reference);
    }
    detail::prepare_output(e, "eval");
    ControlFn ref = detail::train_reference(e);
    const IsreReport rep = isre(e.model, u, e.eval.grid, e.eval.paths, e.eval.seed, e.eval.workers);
    const double l2 = ref ? l2_error(e.model, u, ref, e.eval.grid, std::min<std::size_t>(e.eval.paths, 100000),
                                     e.eval.seed)
                          : std::nan("");
    const double cross =
        crossing_ratio(e.model, u, e.eval.grid, e.eval.paths, e.eval.seed, e.eval.crossing, e.eval.workers);
    CsvWriter csv(e.out_dir / "eval.csv", eval_columns());
    csv.row({label, fmt(rep.n), std::to_string(rep.seed), fmt(rep.isre), fmt(rep.log_mean), fmt(rep.std_dev), fmt(l2),
             fmt(cross)});
    log << "isre " << fmt(rep.isre) << " l2 " << fmt(l2) << " crossing " << fmt(cross) << "\n";
    return int(kOk);
  });
}

/// Writes the preset's reference tables.
inline int cmd_reference(const std::string& config_path, std::ostream& log = std::cerr) {
  return detail::guarded(log, [&] {
    Experiment e = detail::load(config_path, "reference");
    detail::prepare_output(e, "reference");
    if (e.ou) {
      const OuLinearProblem& p = *e.ou;
      CsvWriter csv(e.out_dir / "reference_u_star.csv", {"t", "component", "u"});
      for (std::size_t k = 0; k < e.reference.samples; ++k) {
        const double t = p.horizon * static_cast<double>(k) / static_cast<double>(e.reference.samples - 1);
        const Vector u = ou_linear_u_star(p, t);
        for (Eigen::Index i = 0; i < u.size(); ++i) csv.row({fmt(t), fmt(static_cast<std::size_t>(i)), fmt(u(i))});
      }
      CsvWriter sum(e.out_dir / "reference_summary.csv", {"quantity", "value"});
      sum.row({"free_energy", fmt(ou_linear_free_energy(p))});
      sum.row({"free_energy_em", fmt(ou_linear_free_energy_em(p, e.train.grid))});
    } else if (e.lqg) {
      const LqgProblem& q = *e.lqg;
      const RiccatiSolution s = riccati_solve(q.a, q.b, q.p, q.r, q.horizon, e.reference.riccati_steps);
      CsvWriter csv(e.out_dir / "reference_riccati.csv", {"t", "i", "j", "F"});
      for (std::size_t k = 0; k < s.f.size(); ++k) {
        const double t = s.h * static_cast<double>(k);
        for (Eigen::Index i = 0; i < s.f[k].rows(); ++i) {
          for (Eigen::Index j = 0; j < s.f[k].cols(); ++j) {
            csv.row({fmt(t), fmt(static_cast<std::size_t>(i)), fmt(static_cast<std::size_t>(j)), fmt(s.f[k](i, j))});
          }
        }
      }
    } else {
      if (e.model.dim != 1) throw ConfigError("double_well reference tables exist only for dim = 1");
      const Grid1dValue v = hjb_fd_1d(e.model, e.reference.fd);
      // psi = exp(-V) must stay positive and finite everywhere
      for (double x : v.value) {
        if (!std::isfinite(x)) throw NumericalError("FD value function is not finite (psi <= 0 somewhere)", 0, 0);
      }
      CsvWriter csv(e.out_dir / "reference_fd.csv", {"x", "t", "V", "u_ref"});
      for (std::size_t n = 0; n <= v.time_steps; n += e.reference.fd_stride_t) {
        for (std::size_t j = 0; j < v.nodes; j += e.reference.fd_stride_x) {
          csv.row({fmt(v.x(j)), fmt(v.t(n)), fmt(v.v_at(n, j)), fmt(v.u_at(n, j))});
        }
      }
    }
    return int(kOk);
  });
}

namespace detail {

inline void study_tensorisation(const Experiment& e, std::ostream& log) {
  if (!e.ou) throw ConfigError("the tensorisation study needs preset ou_linear");
  const StudySettings& s = e.study;
  const RobustnessStudy st = tensorisation_study(s.divergences, *e.ou, s.copies, s.grid, s.paths, s.reps, s.seed);
  CsvWriter rows(e.out_dir / "study_tensorisation.csv", {"divergence", "copies", "rep", "estimate", "exact"});
  for (const auto& r : st.rows) {
    rows.row({to_string(r.kind), fmt(r.copies), fmt(r.rep), fmt(r.estimate), fmt(r.exact)});
  }
  CsvWriter sum(e.out_dir / "study_tensorisation_summary.csv",
                {"divergence", "copies", "exact", "mean", "std_dev", "relative_error", "relative_to_mean", "saturated"});
  for (const auto& r : st.summary) {
    sum.row({to_string(r.kind), fmt(r.copies), fmt(r.exact), fmt(r.mean), fmt(r.std_dev), fmt(r.relative_error),
             fmt(r.relative_to_mean), fmt(r.saturated)});
    log << to_string(r.kind) << " M=" << r.copies << " r=" << fmt(r.relative_error) << "\n";
  }
}

inline void study_grad_variance(const Experiment& e, const ControlField& start, double y0, std::size_t iteration,
                                std::ostream& log) {
  const StudySettings& s = e.study;
  CsvWriter rows(e.out_dir / "study_grad_variance.csv", {"loss", "iteration", "rep", "grad_norm"});
  CsvWriter sum(e.out_dir / "study_grad_variance_summary.csv",
                {"loss", "iteration", "mean_variance", "mean_relative_error", "mean_relative_error_ma", "above_floor"});
  for (LossKind kind : s.losses) {
    TrainState state{.control = start, .y0 = y0, .opt = e.opt, .iteration = iteration};
    TrainConfig cfg = e.train;
    cfg.loss.kind = kind;
    cfg.iterations = 1;
    cfg.metric_every = 0;
    if (needs_two_paths(kind) && cfg.batch < 2) throw ConfigError("train batch must be >= 2 for " + std::string(to_string(kind)));
    std::vector<double> rel;
    for (std::size_t j = 0; j <= s.iterations; ++j) {
      if (j % s.every == 0 || j == s.iterations) {
        std::vector<Vector> samples;
        for (std::size_t r = 0; r < s.reps; ++r) {
          const auto seed = rng::derive(rng::derive(s.seed, state.iteration), r);
          samples.push_back(evaluate(cfg.loss, e.model, state.control, state.y0, cfg.grid, s.paths, seed,
                                     cfg.loss_options)
                                .gradient);
          rows.row({to_string(kind), fmt(state.iteration), fmt(r), fmt(samples.back().norm())});
        }
        const GradientVarianceReport rep = summarize_gradients(samples, s.floor, s.components);
        rel.push_back(rep.mean_relative_error);
        const double ma = moving_average(rel, s.window).back();
        sum.row({to_string(kind), fmt(state.iteration), fmt(rep.mean_variance), fmt(rep.mean_relative_error), fmt(ma),
                 fmt(rep.above_floor)});
        log << to_string(kind) << " iteration " << state.iteration << " mean variance " << fmt(rep.mean_variance)
            << "\n";
      }
      if (j == s.iterations) break;
      const TrainResult tr = train(e.model, state, cfg);
      if (tr.abort_reason) throw NumericalError(*tr.abort_reason, 0, 0);
    }
  }
}

inline void study_y0_sweep(const Experiment& e, std::ostream& log) {
  if (!e.ou) throw ConfigError("the y0 sweep needs preset ou_linear");
  const StudySettings& s = e.study;
  const double fe = ou_linear_free_energy(*e.ou);
  std::vector<std::string> cols = {"y0_init"};
  for (const auto& c : train_columns()) cols.push_back(c);
  CsvWriter rows(e.out_dir / "study_y0_sweep.csv", cols);
  CsvWriter sum(e.out_dir / "study_y0_sweep_summary.csv",
                {"y0_init", "first_iteration_below_target", "final_l2_error", "final_y0", "free_energy"});
  for (const auto& v : s.y0_values) {
    const double y0 = v == "free_energy" ? fe : *parse_double(v);
    TrainState state{.control = e.control, .y0 = y0, .opt = e.opt};
    TrainConfig cfg = e.train;
    cfg.loss.kind = LossKind::moment;
    cfg.reference = ou_linear_control(*e.ou);
    if (cfg.metric_every == 0) cfg.metric_every = 1;
    double first = std::nan("");
    double last_l2 = std::nan("");
    cfg.stop = [&](const TrainRecord& r) {
      std::vector<std::string> cells = {fmt(y0)};
      for (auto& c : train_row(r)) cells.push_back(c);
      rows.row(cells);
      if (!std::isnan(r.l2_error)) {
        last_l2 = r.l2_error;
        if (std::isnan(first) && r.l2_error <= s.target_l2) first = static_cast<double>(r.iteration);
      }
      return false;
    };
    const TrainResult tr = train(e.model, state, cfg);
    if (tr.abort_reason) throw NumericalError(*tr.abort_reason, 0, 0);
    sum.row({fmt(y0), fmt(first), fmt(last_l2), fmt(state.y0), fmt(fe)});
    log << "y0 " << fmt(y0) << " reached target at " << fmt(first) << "\n";
  }
}

}  // namespace detail

/// Runs the study named in [study] kind.
inline int cmd_study(const std::string& config_path, std::ostream& log = std::cerr) {
  return detail::guarded(log, [&] {
    Experiment e = detail::load(config_path, "study");
    detail::prepare_output(e, "study");
    if (e.study.kind == "tensorisation") {
      detail::study_tensorisation(e, log);
    } else if (e.study.kind == "grad_variance") {
      ControlField start = e.control;
      double y0 = e.y0;
      std::size_t iteration = 0;
      if (!e.resume.empty()) {
        Checkpoint ck = read_checkpoint(e.resume);
        if (!ck.control.same_architecture(start)) {
          throw ConfigError("checkpoint " + e.resume + " holds " + ck.control.describe() + ", config describes " +
                            start.describe());
        }
        start.unpack(ck.control.params());
        y0 = ck.y0;
        iteration = ck.iteration;
      }
      detail::study_grad_variance(e, start, y0, iteration, log);
    } else {
      detail::study_y0_sweep(e, log);
    }
    return int(kOk);
  });
}

}  // namespace ido::cli
