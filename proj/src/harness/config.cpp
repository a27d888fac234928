#include "hypolab/harness/config.hpp"

#include "hypolab/errors.hpp"
#include "hypolab/harness/artifacts.hpp"
#include "hypolab/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace hypolab::harness {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw ConfigError("invalid value for '" + key + "': " + what);
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) bad(key, "expected a number, got '" + s + "'");
  return v;
}

template <class T>
T to_int(const std::string& key, const std::string& s) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad(key, "expected an integer, got '" + s + "'");
  return v;
}

std::vector<double> to_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) out.push_back(to_double(key, part));
  return out;
}

std::vector<std::string> to_components(const std::string& key, const std::string& s) {
  auto parts = split(s, ';');
  for (const auto& p : parts)
    if (p.empty()) bad(key, "empty component");
  return parts;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
  return s;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "; " : "") + v[i];
  return s;
}

struct Key {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::optional<std::string>(const ExperimentConfig&)> get;
};

template <class T>
std::string show(const T& v) {
  if constexpr (std::is_same_v<T, double>) return format_double(v);
  else if constexpr (std::is_same_v<T, std::string>) return v;
  else if constexpr (std::is_same_v<T, std::vector<double>>) return join(v);
  else if constexpr (std::is_same_v<T, std::vector<std::string>>) return join(v);
  else if constexpr (std::is_same_v<T, std::vector<std::vector<double>>>) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "; " : "") + join(v[i]);
    return s;
  } else return std::to_string(v);
}

template <class T>
T read(const std::string& key, const std::string& value) {
  if constexpr (std::is_same_v<T, double>) return to_double(key, value);
  else if constexpr (std::is_same_v<T, std::string>) return value;
  else if constexpr (std::is_same_v<T, std::vector<double>>) return to_list(key, value);
  else if constexpr (std::is_same_v<T, std::vector<std::string>>) return to_components(key, value);
  else if constexpr (std::is_same_v<T, std::vector<std::vector<double>>>) {
    std::vector<std::vector<double>> pts;
    for (const auto& part : split(value, ';')) pts.push_back(to_list(key, part));
    return pts;
  } else return to_int<T>(key, value);
}

template <class Block, class T>
Key member(Block ExperimentConfig::*block, T Block::*field) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*block.*field = read<T>(k, v); },
          [=](const ExperimentConfig& c) -> std::optional<std::string> { return show(c.*block.*field); }};
}

template <class Block, class T>
Key optional_member(Block ExperimentConfig::*block, std::optional<T> Block::*field) {
  return {[=](ExperimentConfig& c, const std::string& k, const std::string& v) { c.*block.*field = read<T>(k, v); },
          [=](const ExperimentConfig& c) -> std::optional<std::string> {
            const auto& o = c.*block.*field;
            if (!o) return std::nullopt;
            return show(*o);
          }};
}

using Table = std::vector<std::pair<std::string, Key>>;

const Table& key_table() {
  static const Table t = [] {
    Table k;
    auto M = &ExperimentConfig::model;
    auto S = &ExperimentConfig::simulation;
    auto A = &ExperimentConfig::analysis;
    k.emplace_back("model.dim", member(M, &ModelBlock::dim));
    k.emplace_back("model.drift", member(M, &ModelBlock::drift));
    k.emplace_back("model.x0", member(M, &ModelBlock::x0));
    k.emplace_back("simulation.T", member(S, &SimulationBlock::T));
    k.emplace_back("simulation.n_steps", member(S, &SimulationBlock::n_steps));
    k.emplace_back("simulation.scheme",
                   Key{[](ExperimentConfig& c, const std::string& key, const std::string& v) {
                         try {
                           c.simulation.scheme = flows::parse_scheme(v);
                         } catch (const ConfigError& e) {
                           bad(key, e.what());
                         }
                       },
                       [](const ExperimentConfig& c) -> std::optional<std::string> {
                         return std::string(flows::scheme_name(c.simulation.scheme));
                       }});
    k.emplace_back("simulation.paths", member(S, &SimulationBlock::paths));
    k.emplace_back("simulation.seed", member(S, &SimulationBlock::seed));
    k.emplace_back("simulation.refine", member(S, &SimulationBlock::refine));
    k.emplace_back("simulation.monotonicity_L", optional_member(S, &SimulationBlock::monotonicity_L));
    k.emplace_back("simulation.max_divergence_fraction", member(S, &SimulationBlock::max_divergence_fraction));
    k.emplace_back("analysis.L", optional_member(A, &AnalysisBlock::L));
    k.emplace_back("analysis.K", optional_member(A, &AnalysisBlock::K));
    k.emplace_back("analysis.t", optional_member(A, &AnalysisBlock::t));
    k.emplace_back("analysis.which", optional_member(A, &AnalysisBlock::which));
    k.emplace_back("analysis.epsilon", optional_member(A, &AnalysisBlock::epsilon));
    k.emplace_back("analysis.field", optional_member(A, &AnalysisBlock::field));
    k.emplace_back("analysis.p", optional_member(A, &AnalysisBlock::p));
    k.emplace_back("analysis.p_list", optional_member(A, &AnalysisBlock::p_list));
    k.emplace_back("analysis.t_list", optional_member(A, &AnalysisBlock::t_list));
    k.emplace_back("analysis.margin", optional_member(A, &AnalysisBlock::margin));
    k.emplace_back("analysis.N", optional_member(A, &AnalysisBlock::N));
    k.emplace_back("analysis.M", optional_member(A, &AnalysisBlock::M));
    k.emplace_back("analysis.radius", optional_member(A, &AnalysisBlock::radius));
    k.emplace_back("analysis.n_ball", optional_member(A, &AnalysisBlock::n_ball));
    k.emplace_back("analysis.grid_lo", optional_member(A, &AnalysisBlock::grid_lo));
    k.emplace_back("analysis.grid_hi", optional_member(A, &AnalysisBlock::grid_hi));
    k.emplace_back("analysis.grid_n", optional_member(A, &AnalysisBlock::grid_n));
    k.emplace_back("analysis.bandwidth", optional_member(A, &AnalysisBlock::bandwidth));
    k.emplace_back("analysis.box_lo", optional_member(A, &AnalysisBlock::box_lo));
    k.emplace_back("analysis.box_hi", optional_member(A, &AnalysisBlock::box_hi));
    k.emplace_back("analysis.box_n", optional_member(A, &AnalysisBlock::box_n));
    k.emplace_back("analysis.probe_lo", optional_member(A, &AnalysisBlock::probe_lo));
    k.emplace_back("analysis.probe_hi", optional_member(A, &AnalysisBlock::probe_hi));
    k.emplace_back("analysis.probe_samples", optional_member(A, &AnalysisBlock::probe_samples));
    k.emplace_back("analysis.declared_L", optional_member(A, &AnalysisBlock::declared_L));
    k.emplace_back("analysis.declared_L1", optional_member(A, &AnalysisBlock::declared_L1));
    k.emplace_back("analysis.declared_N", optional_member(A, &AnalysisBlock::declared_N));
    k.emplace_back("analysis.declared_L3", optional_member(A, &AnalysisBlock::declared_L3));
    k.emplace_back("analysis.moment_x0", optional_member(A, &AnalysisBlock::moment_x0));
    k.emplace_back("analysis.save_paths", optional_member(A, &AnalysisBlock::save_paths));
    k.emplace_back("output.dir",
                   Key{[](ExperimentConfig& c, const std::string&, const std::string& v) { c.output_dir = v; },
                       [](const ExperimentConfig& c) { return c.output_dir; }});
    return k;
  }();
  return t;
}

const Key* find_key(const std::string& name) {
  for (const auto& [n, k] : key_table())
    if (n == name) return &k;
  return nullptr;
}

void validate(ExperimentConfig& c) {
  auto& m = c.model;
  if (m.dim < 1) throw ConfigError("invalid value for 'model.dim': must be >= 1");
  if (m.drift.size() != static_cast<std::size_t>(m.dim))
    throw ConfigError("invalid value for 'model.drift': expected " + std::to_string(m.dim) + " components");
  if (m.diffusion.empty()) throw ConfigError("missing key 'model.diffusion.1'");
  for (std::size_t k = 0; k < m.diffusion.size(); ++k)
    if (m.diffusion[k].size() != static_cast<std::size_t>(m.dim))
      throw ConfigError("invalid value for 'model.diffusion." + std::to_string(k + 1) + "': expected " +
                        std::to_string(m.dim) + " components");
  if (m.x0.size() != static_cast<std::size_t>(m.dim))
    throw ConfigError("invalid value for 'model.x0': expected " + std::to_string(m.dim) + " coordinates");
  try {
    (void)c.coefficients();
  } catch (const ParseError& e) {
    throw ConfigError(std::string("invalid expression in 'model': ") + e.what());
  }
  try {
    c.sim_config().validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid 'simulation' block: ") + e.what());
  }
  if (c.simulation.paths < 1) throw ConfigError("invalid value for 'simulation.paths': must be >= 1");
  if (!(c.simulation.max_divergence_fraction >= 0.0 && c.simulation.max_divergence_fraction <= 1.0))
    throw ConfigError("invalid value for 'simulation.max_divergence_fraction': must lie in [0, 1]");
  if (c.analysis.which && *c.analysis.which != "C-matrix" && *c.analysis.which != "Q-matrix")
    throw ConfigError("invalid value for 'analysis.which': expected C-matrix or Q-matrix");
}

}  // namespace

fieldlang::CoefficientSet ExperimentConfig::coefficients() const {
  return fieldlang::CoefficientSet::parse(model.dim, model.drift, model.diffusion);
}

flows::SimConfig ExperimentConfig::sim_config() const {
  flows::SimConfig s;
  s.T = simulation.T;
  s.n_steps = simulation.n_steps;
  s.scheme = simulation.scheme;
  s.seed = simulation.seed;
  s.x0 = model.x0;
  s.refine = simulation.refine;
  s.monotonicity_L = simulation.monotonicity_L;
  return s;
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  static const std::set<std::string> sections = {"model", "simulation", "analysis", "output"};
  std::set<std::string> seen;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  std::map<std::size_t, std::vector<std::string>> columns;
  bool have_dim = false, have_drift = false, have_x0 = false;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError("unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
    const std::string key = section + "." + trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("duplicate key '" + key + "'");
    if (key.rfind("model.diffusion.", 0) == 0) {
      const std::string idx = key.substr(16);
      std::size_t k = 0;
      const auto [p, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), k);
      if (ec != std::errc() || p != idx.data() + idx.size() || k < 1) throw ConfigError("unknown key '" + key + "'");
      columns[k] = to_components(key, value);
      continue;
    }
    const Key* desc = find_key(key);
    if (!desc) throw ConfigError("unknown key '" + key + "'");
    desc->set(c, key, value);
    have_dim |= key == "model.dim";
    have_drift |= key == "model.drift";
    have_x0 |= key == "model.x0";
  }
  if (!have_dim) throw ConfigError("missing key 'model.dim'");
  if (!have_drift) throw ConfigError("missing key 'model.drift'");
  if (!have_x0) throw ConfigError("missing key 'model.x0'");
  std::size_t expect = 1;
  for (auto& [k, col] : columns) {
    if (k != expect) throw ConfigError("missing key 'model.diffusion." + std::to_string(expect) + "'");
    c.model.diffusion.push_back(std::move(col));
    ++expect;
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

namespace {

std::string render(const ExperimentConfig& c, bool for_hash) {
  std::ostringstream out;
  std::string current;
  auto put = [&](const std::string& name, const std::string& value) {
    const std::string sec = name.substr(0, name.find('.'));
    if (sec != current) {
      out << (current.empty() ? "" : "\n") << "[" << sec << "]\n";
      current = sec;
    }
    out << name.substr(sec.size() + 1) << " = " << value << "\n";
  };
  for (const auto& [name, key] : key_table()) {
    if (for_hash && (name == "simulation.seed" || name == "output.dir")) continue;
    if (const auto v = key.get(c)) put(name, *v);
    if (name == "model.drift")
      for (std::size_t k = 0; k < c.model.diffusion.size(); ++k)
        put("model.diffusion." + std::to_string(k + 1), join(c.model.diffusion[k]));
  }
  return out.str();
}

}  // namespace

std::string resolved_text(const ExperimentConfig& config) { return render(config, false); }

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(render(config, true)); }

}  // namespace hypolab::harness
