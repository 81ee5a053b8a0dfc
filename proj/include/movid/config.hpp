#pragma once

#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "movid/common.hpp"
#include "movid/model.hpp"

namespace movid {

// ---------------------------------------------------------------------------
// Flat `key = value` config with [section] headers, parsed strictly: bad
// syntax, duplicate keys, malformed numbers, and unknown keys all raise
// ConfigParseError naming the key and line.
// ---------------------------------------------------------------------------

struct StreamConfig {
  double theta_flip = 0.5, hysteresis = 0.05, sigma = 0.35;
  int n_hard = 4;
};

struct EvalConfig {
  uint64_t kmeans_seed = 17;
  int kmeans_restarts = 50;
};

// Paper-scale defaults; desk() is the laptop profile used by the bundled
// benchmark (smaller batch, fewer epochs).
struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  int batch_size = 64, epochs = 40, clip_length = 16;
  double grad_clip = 1.0;
  double milestone1 = 0.6, milestone2 = 0.85, decay = 0.1;
  uint64_t seed = 1;
  StreamConfig stream;
  EvalConfig eval;

  static TrainConfig desk() {
    TrainConfig c;
    c.batch_size = 16;
    c.epochs = 10;
    return c;
  }
};

namespace config_detail {

struct RawEntry {
  std::string key;  // "section.key"
  std::string value;
  int line = 0;
};

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<RawEntry> parse_raw(const std::string& text) {
  std::vector<RawEntry> entries;
  std::set<std::string> seen;
  std::string section;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') {
      if (pos > text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigParseError("line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigParseError("line " + std::to_string(line_no) + ": empty section name");
    } else {
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigParseError("line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigParseError("line " + std::to_string(line_no) + ": empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (!seen.insert(full).second)
        throw ConfigParseError("line " + std::to_string(line_no) + ": duplicate key " + full);
      entries.push_back({full, value, line_no});
    }
    if (pos > text.size()) break;
  }
  return entries;
}

// Typed consumption; leftover keys are errors.
class Binder {
 public:
  explicit Binder(std::vector<RawEntry> entries) : entries_(std::move(entries)) {}

  void number(const std::string& key, double* out) {
    const RawEntry* e = take(key);
    if (!e) return;
    char* endp = nullptr;
    const double v = std::strtod(e->value.c_str(), &endp);
    if (endp == e->value.c_str() || *endp != '\0') bad(*e);
    *out = v;
  }
  void integer(const std::string& key, int* out) {
    const RawEntry* e = take(key);
    if (!e) return;
    char* endp = nullptr;
    const long v = std::strtol(e->value.c_str(), &endp, 10);
    if (endp == e->value.c_str() || *endp != '\0') bad(*e);
    *out = static_cast<int>(v);
  }
  void uinteger(const std::string& key, uint64_t* out) {
    const RawEntry* e = take(key);
    if (!e) return;
    char* endp = nullptr;
    const unsigned long long v = std::strtoull(e->value.c_str(), &endp, 10);
    if (endp == e->value.c_str() || *endp != '\0') bad(*e);
    *out = v;
  }
  void text(const std::string& key, std::string* out) {
    const RawEntry* e = take(key);
    if (e) *out = e->value;
  }

  void finish() const {
    for (const auto& e : entries_)
      if (!consumed_.count(e.key))
        throw ConfigParseError("line " + std::to_string(e.line) + ": unknown key " + e.key);
  }

 private:
  const RawEntry* take(const std::string& key) {
    for (const auto& e : entries_)
      if (e.key == key) {
        consumed_.insert(key);
        return &e;
      }
    return nullptr;
  }
  [[noreturn]] static void bad(const RawEntry& e) {
    throw ConfigParseError("line " + std::to_string(e.line) + ": bad value for " + e.key);
  }

  std::vector<RawEntry> entries_;
  std::set<std::string> consumed_;
};

}  // namespace config_detail

inline TrainConfig parse_train_config(const std::string& text) {
  config_detail::Binder b(config_detail::parse_raw(text));
  TrainConfig c;
  b.integer("model.d_view", &c.model.enc.d_view);
  b.integer("model.d_motion", &c.model.enc.d_motion);
  b.integer("model.d_base", &c.model.enc.d_base);
  b.integer("model.k_bases", &c.model.enc.k_bases);
  b.integer("model.hidden", &c.model.enc.hidden);
  b.number("model.dropout", &c.model.enc.dropout);
  b.text("model.gelu", &c.model.enc.gelu);
  b.integer("model.window", &c.model.window);
  b.uinteger("model.seed", &c.model.seed);
  b.number("loss.alpha", &c.model.alpha);
  b.number("loss.beta", &c.model.beta);
  b.number("loss.tau", &c.model.tau);
  b.number("train.lr", &c.lr);
  b.integer("train.batch_size", &c.batch_size);
  b.integer("train.epochs", &c.epochs);
  b.integer("train.clip_length", &c.clip_length);
  b.number("train.grad_clip", &c.grad_clip);
  b.number("train.milestone1", &c.milestone1);
  b.number("train.milestone2", &c.milestone2);
  b.number("train.decay", &c.decay);
  b.uinteger("train.seed", &c.seed);
  b.number("stream.theta_flip", &c.stream.theta_flip);
  b.number("stream.hysteresis", &c.stream.hysteresis);
  b.number("stream.sigma", &c.stream.sigma);
  b.integer("stream.n_hard", &c.stream.n_hard);
  b.uinteger("eval.kmeans_seed", &c.eval.kmeans_seed);
  b.integer("eval.kmeans_restarts", &c.eval.kmeans_restarts);
  b.finish();
  c.model.validate();
  return c;
}

inline std::string serialize_train_config(const TrainConfig& c) {
  std::string s;
  auto kv = [&](const char* k, const std::string& v) {
    s += k;
    s += " = ";
    s += v;
    s += '\n';
  };
  s += "[model]\n";
  kv("d_view", std::to_string(c.model.enc.d_view));
  kv("d_motion", std::to_string(c.model.enc.d_motion));
  kv("d_base", std::to_string(c.model.enc.d_base));
  kv("k_bases", std::to_string(c.model.enc.k_bases));
  kv("hidden", std::to_string(c.model.enc.hidden));
  kv("dropout", format_g17(c.model.enc.dropout));
  kv("gelu", c.model.enc.gelu);
  kv("window", std::to_string(c.model.window));
  kv("seed", std::to_string(c.model.seed));
  s += "[loss]\n";
  kv("alpha", format_g17(c.model.alpha));
  kv("beta", format_g17(c.model.beta));
  kv("tau", format_g17(c.model.tau));
  s += "[train]\n";
  kv("lr", format_g17(c.lr));
  kv("batch_size", std::to_string(c.batch_size));
  kv("epochs", std::to_string(c.epochs));
  kv("clip_length", std::to_string(c.clip_length));
  kv("grad_clip", format_g17(c.grad_clip));
  kv("milestone1", format_g17(c.milestone1));
  kv("milestone2", format_g17(c.milestone2));
  kv("decay", format_g17(c.decay));
  kv("seed", std::to_string(c.seed));
  s += "[stream]\n";
  kv("theta_flip", format_g17(c.stream.theta_flip));
  kv("hysteresis", format_g17(c.stream.hysteresis));
  kv("sigma", format_g17(c.stream.sigma));
  kv("n_hard", std::to_string(c.stream.n_hard));
  s += "[eval]\n";
  kv("kmeans_seed", std::to_string(c.eval.kmeans_seed));
  kv("kmeans_restarts", std::to_string(c.eval.kmeans_restarts));
  return s;
}

}  // namespace movid
