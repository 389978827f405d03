#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metadrn/episodes.hpp"
#include "metadrn/meta.hpp"
#include "metadrn/metrics.hpp"
#include "metadrn/model.hpp"

namespace metadrn {

enum class Algorithm { maml, fomaml, metasgd, reptile };

inline const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::maml: return "maml";
    case Algorithm::fomaml: return "fomaml";
    case Algorithm::metasgd: return "metasgd";
    default: return "reptile";
  }
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "maml") return Algorithm::maml;
  if (s == "fomaml") return Algorithm::fomaml;
  if (s == "metasgd") return Algorithm::metasgd;
  if (s == "reptile") return Algorithm::reptile;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

// Flat key = value run configuration. Defaults reproduce the training
// protocol: maml/fomaml/metasgd use meta-batch 5, one inner step at 1e-3,
// outer 1e-3 with halve-on-plateau (patience 8); reptile uses meta-batch 8,
// five inner steps, outer 3e-2 linearly annealed to 3e-5 over the run.
struct RunConfig {
  Algorithm algorithm = Algorithm::maml;

  std::string dataset_kind = "synthetic";  // synthetic | disk
  std::string dataset_path;
  std::string dataset_manifest;
  int synth_train_classes = 24;
  int synth_val_classes = 4;
  int synth_test_classes = 8;
  int synth_samples_per_class = 10;
  uint64_t synth_seed = 1234;

  double model_width = 1.0;
  int model_num_classes = 2;
  int64_t image_size = 32;
  double leaky_slope = 0.01;

  double inner_alpha = 1e-3;
  int inner_steps = 1;
  int inner_eval_steps = -1;

  std::string outer_optimizer = "adamw";  // adamw | sgd
  double outer_beta = 1e-3;
  AdamWConfig adamw;
  std::string schedule = "plateau";  // plateau | linear
  double plateau_factor = 0.5;
  int plateau_patience = 8;
  double plateau_min_delta = 1e-4;
  double linear_end = 3e-5;

  double metasgd_alpha_init = 1e-3;
  bool metasgd_clamp_nonneg = false;

  int meta_batch = 5;
  int epochs = 200;
  int train_query = 5;
  int eval_query = 9;
  int checkpoint_every = 5;
  int eval_episodes = 40;
  bool log_wall_clock = true;

  uint64_t seed = 0;
  std::string output_dir;

  ModelSpec model_spec() const {
    ModelSpec spec;
    spec.width_multiplier = model_width;
    spec.num_classes = model_num_classes;
    spec.leaky_slope = leaky_slope;
    return spec;
  }

  InnerLoopConfig inner() const { return {inner_alpha, inner_steps, inner_eval_steps}; }

  ScheduleConfig schedule_config() const {
    ScheduleConfig sc;
    sc.kind = schedule == "linear" ? ScheduleConfig::Kind::linear : ScheduleConfig::Kind::plateau;
    sc.base = outer_beta;
    sc.factor = plateau_factor;
    sc.patience = plateau_patience;
    sc.min_delta = plateau_min_delta;
    sc.end = linear_end;
    sc.total_epochs = epochs;
    return sc;
  }

  void validate() const {
    check_arg(dataset_kind == "synthetic" || dataset_kind == "disk",
              "config: dataset.kind must be synthetic or disk");
    if (dataset_kind == "disk") check_arg(!dataset_path.empty(), "config: dataset.path required");
    check_arg(model_width > 0.0 && model_width <= 1.0, "config: model.width must be in (0,1]");
    check_arg(image_size % 4 == 0, "config: model.image_size must be divisible by 4");
    check_arg(inner_alpha >= 0.0, "config: inner.alpha must be >= 0");
    check_arg(inner_steps >= 1, "config: inner.steps must be >= 1");
    check_arg(outer_optimizer == "adamw" || outer_optimizer == "sgd",
              "config: outer.optimizer must be adamw or sgd");
    check_arg(schedule == "plateau" || schedule == "linear",
              "config: outer.schedule must be plateau or linear");
    check_arg(plateau_factor > 0.0 && plateau_factor < 1.0,
              "config: outer.plateau.factor must be in (0,1)");
    check_arg(plateau_patience >= 0, "config: outer.plateau.patience must be >= 0");
    check_arg(linear_end <= outer_beta, "config: outer.linear.end must not exceed outer.beta");
    check_arg(meta_batch >= 1, "config: train.meta_batch must be >= 1");
    check_arg(epochs >= 1, "config: train.epochs must be >= 1");
    check_arg(train_query >= 1 && eval_query >= 1, "config: query sizes must be >= 1");
    check_arg(checkpoint_every >= 1, "config: train.checkpoint_every must be >= 1");
    schedule_config().validate();
    inner().validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& v, const std::string& key) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: bad number '" + v + "' for key " + key);
  return x;
}

inline int64_t parse_i64(const std::string& v, const std::string& key) {
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: bad integer '" + v + "' for key " + key);
  return x;
}

inline uint64_t parse_u64(const std::string& v, const std::string& key) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: bad integer '" + v + "' for key " + key);
  return x;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean '" + v + "' for key " + key);
}

// Accepts decimals and p/q rationals ("1/8").
inline double parse_width(const std::string& v, const std::string& key) {
  const size_t slash = v.find('/');
  if (slash == std::string::npos) return parse_double(v, key);
  const double num = parse_double(v.substr(0, slash), key);
  const double den = parse_double(v.substr(slash + 1), key);
  check_arg(den != 0.0, "config: zero denominator in " + key);
  return num / den;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void apply_defaults(RunConfig& cfg, Algorithm algo) {
  cfg = RunConfig{};
  cfg.algorithm = algo;
  if (algo == Algorithm::reptile) {
    cfg.meta_batch = 8;
    cfg.inner_steps = 5;
    cfg.outer_beta = 3e-2;
    cfg.schedule = "linear";
  } else {
    cfg.meta_batch = 5;
    cfg.inner_steps = 1;
    cfg.outer_beta = 1e-3;
    cfg.schedule = "plateau";
  }
}

inline void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_i64;
  using detail::parse_u64;
  if (key == "algorithm") cfg.algorithm = parse_algorithm(value);
  else if (key == "dataset.kind") cfg.dataset_kind = value;
  else if (key == "dataset.path") cfg.dataset_path = value;
  else if (key == "dataset.manifest") cfg.dataset_manifest = value;
  else if (key == "dataset.synth.train_classes") cfg.synth_train_classes = static_cast<int>(parse_i64(value, key));
  else if (key == "dataset.synth.val_classes") cfg.synth_val_classes = static_cast<int>(parse_i64(value, key));
  else if (key == "dataset.synth.test_classes") cfg.synth_test_classes = static_cast<int>(parse_i64(value, key));
  else if (key == "dataset.synth.samples_per_class") cfg.synth_samples_per_class = static_cast<int>(parse_i64(value, key));
  else if (key == "dataset.synth.seed") cfg.synth_seed = parse_u64(value, key);
  else if (key == "model.width") cfg.model_width = detail::parse_width(value, key);
  else if (key == "model.num_classes") cfg.model_num_classes = static_cast<int>(parse_i64(value, key));
  else if (key == "model.image_size") cfg.image_size = parse_i64(value, key);
  else if (key == "model.leaky_slope") cfg.leaky_slope = parse_double(value, key);
  else if (key == "inner.alpha") cfg.inner_alpha = parse_double(value, key);
  else if (key == "inner.steps") cfg.inner_steps = static_cast<int>(parse_i64(value, key));
  else if (key == "inner.eval_steps") cfg.inner_eval_steps = static_cast<int>(parse_i64(value, key));
  else if (key == "outer.optimizer") cfg.outer_optimizer = value;
  else if (key == "outer.beta") cfg.outer_beta = parse_double(value, key);
  else if (key == "outer.adamw.beta1") cfg.adamw.beta1 = parse_double(value, key);
  else if (key == "outer.adamw.beta2") cfg.adamw.beta2 = parse_double(value, key);
  else if (key == "outer.adamw.eps") cfg.adamw.eps = parse_double(value, key);
  else if (key == "outer.adamw.weight_decay") cfg.adamw.weight_decay = parse_double(value, key);
  else if (key == "outer.schedule") cfg.schedule = value;
  else if (key == "outer.plateau.factor") cfg.plateau_factor = parse_double(value, key);
  else if (key == "outer.plateau.patience") cfg.plateau_patience = static_cast<int>(parse_i64(value, key));
  else if (key == "outer.plateau.min_delta") cfg.plateau_min_delta = parse_double(value, key);
  else if (key == "outer.linear.end") cfg.linear_end = parse_double(value, key);
  else if (key == "metasgd.alpha_init") cfg.metasgd_alpha_init = parse_double(value, key);
  else if (key == "metasgd.clamp_nonneg") cfg.metasgd_clamp_nonneg = parse_bool(value, key);
  else if (key == "train.meta_batch") cfg.meta_batch = static_cast<int>(parse_i64(value, key));
  else if (key == "train.epochs") cfg.epochs = static_cast<int>(parse_i64(value, key));
  else if (key == "train.query_size") cfg.train_query = static_cast<int>(parse_i64(value, key));
  else if (key == "train.checkpoint_every") cfg.checkpoint_every = static_cast<int>(parse_i64(value, key));
  else if (key == "eval.query_size") cfg.eval_query = static_cast<int>(parse_i64(value, key));
  else if (key == "eval.episodes") cfg.eval_episodes = static_cast<int>(parse_i64(value, key));
  else if (key == "log.wall_clock") cfg.log_wall_clock = parse_bool(value, key);
  else if (key == "seed") cfg.seed = parse_u64(value, key);
  else if (key == "output_dir") cfg.output_dir = value;
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not 'key = value'");
    pairs.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  Algorithm algo = Algorithm::maml;
  bool saw_algo = false;
  for (const auto& [k, v] : pairs)
    if (k == "algorithm") {
      algo = parse_algorithm(v);
      saw_algo = true;
    }
  if (!saw_algo) throw std::invalid_argument("config: missing required key 'algorithm'");
  RunConfig cfg;
  apply_defaults(cfg, algo);
  for (const auto& [k, v] : pairs) apply_key(cfg, k, v);
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

// Canonical serialization: every key, sorted, one per line. Basis of the
// config hash recorded in checkpoints.
inline std::string serialize_config(const RunConfig& cfg) {
  using detail::fmt_double;
  std::map<std::string, std::string> kv;
  kv["algorithm"] = algorithm_name(cfg.algorithm);
  kv["dataset.kind"] = cfg.dataset_kind;
  kv["dataset.path"] = cfg.dataset_path;
  kv["dataset.manifest"] = cfg.dataset_manifest;
  kv["dataset.synth.train_classes"] = std::to_string(cfg.synth_train_classes);
  kv["dataset.synth.val_classes"] = std::to_string(cfg.synth_val_classes);
  kv["dataset.synth.test_classes"] = std::to_string(cfg.synth_test_classes);
  kv["dataset.synth.samples_per_class"] = std::to_string(cfg.synth_samples_per_class);
  kv["dataset.synth.seed"] = std::to_string(cfg.synth_seed);
  kv["model.width"] = fmt_double(cfg.model_width);
  kv["model.num_classes"] = std::to_string(cfg.model_num_classes);
  kv["model.image_size"] = std::to_string(cfg.image_size);
  kv["model.leaky_slope"] = fmt_double(cfg.leaky_slope);
  kv["inner.alpha"] = fmt_double(cfg.inner_alpha);
  kv["inner.steps"] = std::to_string(cfg.inner_steps);
  kv["inner.eval_steps"] = std::to_string(cfg.inner_eval_steps);
  kv["outer.optimizer"] = cfg.outer_optimizer;
  kv["outer.beta"] = fmt_double(cfg.outer_beta);
  kv["outer.adamw.beta1"] = fmt_double(cfg.adamw.beta1);
  kv["outer.adamw.beta2"] = fmt_double(cfg.adamw.beta2);
  kv["outer.adamw.eps"] = fmt_double(cfg.adamw.eps);
  kv["outer.adamw.weight_decay"] = fmt_double(cfg.adamw.weight_decay);
  kv["outer.schedule"] = cfg.schedule;
  kv["outer.plateau.factor"] = fmt_double(cfg.plateau_factor);
  kv["outer.plateau.patience"] = std::to_string(cfg.plateau_patience);
  kv["outer.plateau.min_delta"] = fmt_double(cfg.plateau_min_delta);
  kv["outer.linear.end"] = fmt_double(cfg.linear_end);
  kv["metasgd.alpha_init"] = fmt_double(cfg.metasgd_alpha_init);
  kv["metasgd.clamp_nonneg"] = cfg.metasgd_clamp_nonneg ? "true" : "false";
  kv["train.meta_batch"] = std::to_string(cfg.meta_batch);
  kv["train.epochs"] = std::to_string(cfg.epochs);
  kv["train.query_size"] = std::to_string(cfg.train_query);
  kv["train.checkpoint_every"] = std::to_string(cfg.checkpoint_every);
  kv["eval.query_size"] = std::to_string(cfg.eval_query);
  kv["eval.episodes"] = std::to_string(cfg.eval_episodes);
  kv["log.wall_clock"] = cfg.log_wall_clock ? "true" : "false";
  kv["seed"] = std::to_string(cfg.seed);
  kv["output_dir"] = cfg.output_dir;
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(serialize_config(cfg)); }

// ---- checkpoints -------------------------------------------------------------------

// Binary layout (little-endian): "MDRN", u32 version, u64 config hash,
// u64 record count, then length-prefixed named arrays:
//   u32 name_len, name, u8 dtype (0 f32 / 1 f64 / 2 u64), u32 rank,
//   u64 dims[rank], raw payload.
struct TrainState {
  int64_t epoch = 0;  // completed epochs
  uint64_t seed = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::vector<double> val_history;
  ParamSet<float> theta;
  std::optional<ParamSet<float>> alpha;
  AdamWState<float> adam_theta;
  std::optional<AdamWState<float>> adam_alpha;
};

namespace detail {

struct Record {
  std::string name;
  uint8_t dtype = 0;
  Shape dims;
  std::vector<char> payload;
};

inline void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<char*>(&v), 4); }
inline void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<char*>(&v), 8); }

inline void append_record(std::string& out, const std::string& name, uint8_t dtype,
                          const Shape& dims, const void* data, size_t bytes) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  out.push_back(static_cast<char>(dtype));
  put_u32(out, static_cast<uint32_t>(dims.size()));
  for (int64_t d : dims) put_u64(out, static_cast<uint64_t>(d));
  out.append(reinterpret_cast<const char*>(data), bytes);
}

inline void append_f32(std::string& out, const std::string& name, const Tensor<float>& t) {
  append_record(out, name, 0, t.shape(), t.data().data(), t.data().size() * sizeof(float));
}

inline void append_f64vec(std::string& out, const std::string& name,
                          const std::vector<double>& v) {
  append_record(out, name, 1, {static_cast<int64_t>(v.size())}, v.data(), v.size() * 8);
}

inline void append_u64(std::string& out, const std::string& name, uint64_t v) {
  append_record(out, name, 2, {1}, &v, 8);
}

}  // namespace detail

inline std::string encode_checkpoint(const RunConfig& cfg, const TrainState& state) {
  std::string out = "MDRN";
  detail::put_u32(out, 1);
  detail::put_u64(out, config_hash(cfg));
  // 5 meta records, then theta + its two moment blocks, then the alpha
  // section (step record + alpha + its two moment blocks) when present
  uint64_t records = 5 + state.theta.size() * 3;
  if (state.alpha) records += 1 + state.alpha->size() * 3;
  detail::put_u64(out, records);

  detail::append_u64(out, "meta.epoch", static_cast<uint64_t>(state.epoch));
  detail::append_u64(out, "meta.seed", state.seed);
  detail::append_f64vec(out, "meta.best", {state.best_metric});
  detail::append_f64vec(out, "meta.val_history", state.val_history);
  detail::append_u64(out, "meta.adam_theta.step", static_cast<uint64_t>(state.adam_theta.step));
  for (const auto& [name, t] : state.theta) detail::append_f32(out, "theta." + name, t);
  for (const auto& [name, t] : state.adam_theta.m) detail::append_f32(out, "adam_m." + name, t);
  for (const auto& [name, t] : state.adam_theta.v) detail::append_f32(out, "adam_v." + name, t);
  if (state.alpha) {
    detail::append_u64(out, "meta.adam_alpha.step",
                       static_cast<uint64_t>(state.adam_alpha->step));
    for (const auto& [name, t] : *state.alpha) detail::append_f32(out, "alpha." + name, t);
    for (const auto& [name, t] : state.adam_alpha->m)
      detail::append_f32(out, "alpha_adam_m." + name, t);
    for (const auto& [name, t] : state.adam_alpha->v)
      detail::append_f32(out, "alpha_adam_v." + name, t);
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const RunConfig& cfg,
                            const TrainState& state) {
  const std::string bytes = encode_checkpoint(cfg, state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("checkpoint: cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("checkpoint: short write to '" + path + "'");
}

inline TrainState load_checkpoint(const std::string& path, const RunConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (buf.size() - pos < n) fail("checkpoint: truncated file '" + path + "'");
  };
  need(4);
  if (buf.compare(0, 4, "MDRN") != 0) fail("checkpoint: bad magic in '" + path + "'");
  pos = 4;
  auto get_u32 = [&] {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  };
  auto get_u64 = [&] {
    need(8);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  };
  const uint32_t version = get_u32();
  if (version != 1) fail("checkpoint: unsupported version " + std::to_string(version));
  const uint64_t hash = get_u64();
  if (hash != config_hash(cfg))
    throw std::invalid_argument(
        "checkpoint: config hash mismatch (checkpoint was written by a different config)");
  const uint64_t records = get_u64();

  TrainState state;
  AdamWState<float> adam_alpha;
  ParamSet<float> alpha;
  bool has_alpha = false;
  for (uint64_t r = 0; r < records; ++r) {
    const uint32_t name_len = get_u32();
    need(name_len);
    std::string name = buf.substr(pos, name_len);
    pos += name_len;
    need(1);
    const uint8_t dtype = static_cast<uint8_t>(buf[pos++]);
    const uint32_t rank = get_u32();
    Shape dims;
    int64_t count = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      dims.push_back(static_cast<int64_t>(get_u64()));
      count *= dims.back();
    }
    const size_t elem = dtype == 0 ? 4 : 8;
    need(static_cast<size_t>(count) * elem);
    const char* payload = buf.data() + pos;
    pos += static_cast<size_t>(count) * elem;

    auto as_f32 = [&] {
      Tensor<float> t = Tensor<float>::uninit(dims);
      std::memcpy(t.raw().data(), payload, static_cast<size_t>(count) * 4);
      return t;
    };
    if (name == "meta.epoch") state.epoch = static_cast<int64_t>(*reinterpret_cast<const uint64_t*>(payload));
    else if (name == "meta.seed") state.seed = *reinterpret_cast<const uint64_t*>(payload);
    else if (name == "meta.best") state.best_metric = *reinterpret_cast<const double*>(payload);
    else if (name == "meta.val_history") {
      state.val_history.resize(static_cast<size_t>(count));
      std::memcpy(state.val_history.data(), payload, static_cast<size_t>(count) * 8);
    } else if (name == "meta.adam_theta.step") {
      state.adam_theta.step = static_cast<int64_t>(*reinterpret_cast<const uint64_t*>(payload));
    } else if (name == "meta.adam_alpha.step") {
      adam_alpha.step = static_cast<int64_t>(*reinterpret_cast<const uint64_t*>(payload));
      has_alpha = true;
    } else if (name.starts_with("theta.")) {
      state.theta.add(name.substr(6), as_f32());
    } else if (name.starts_with("adam_m.")) {
      state.adam_theta.m.add(name.substr(7), as_f32());
    } else if (name.starts_with("adam_v.")) {
      state.adam_theta.v.add(name.substr(7), as_f32());
    } else if (name.starts_with("alpha_adam_m.")) {
      adam_alpha.m.add(name.substr(13), as_f32());
      has_alpha = true;
    } else if (name.starts_with("alpha_adam_v.")) {
      adam_alpha.v.add(name.substr(13), as_f32());
      has_alpha = true;
    } else if (name.starts_with("alpha.")) {
      alpha.add(name.substr(6), as_f32());
      has_alpha = true;
    } else {
      fail("checkpoint: unknown record '" + name + "'");
    }
  }
  if (has_alpha) {
    state.alpha = std::move(alpha);
    state.adam_alpha = std::move(adam_alpha);
  }
  return state;
}

// ---- orchestration -------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double meta_lr = 0;
  double train_loss = 0;
  double val_soft_miou = 0;
  double val_miou_0_5 = 0;
  double val_miou_0_35 = 0;
  double seconds = 0;
};

struct EvalTable {
  int episodes = 0;
  Summary soft, at05, at035;           // across episodes
  Summary cls_soft, cls05, cls035;     // across classes (episode means per class)
};

struct RunReport {
  std::vector<EpochRow> rows;
  std::optional<EvalTable> test;
  int64_t param_count = 0;
  double mean_epoch_seconds = 0;
};

namespace detail {

inline Rng stream_for(uint64_t seed, const char* purpose, int64_t epoch) {
  return Rng(seed).fork(fnv1a64(purpose) + static_cast<uint64_t>(epoch) * 0x9e37u);
}

template <typename T>
Task<T> episode_task(const ModelSpec& spec, const Episode<T>& ep) {
  Task<T> task;
  Tensor<T> sup_x = stack_images(ep.support);
  Tensor<T> sup_y = stack_masks(ep.support);
  task.support_loss = [spec, sup_x, sup_y](const ParamSet<T>& p) {
    return softmax_cross_entropy(forward(spec, p, sup_x), sup_y);
  };
  if (!ep.query.empty()) {
    Tensor<T> qry_x = stack_images(ep.query);
    Tensor<T> qry_y = stack_masks(ep.query);
    task.query_loss = [spec, qry_x, qry_y](const ParamSet<T>& p) {
      return softmax_cross_entropy(forward(spec, p, qry_x), qry_y);
    };
  }
  return task;
}

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string csv_row(const EpochRow& r, bool wall_clock) {
  char sec[32];
  std::snprintf(sec, sizeof(sec), "%.3f", wall_clock ? r.seconds : 0.0);
  return std::to_string(r.epoch) + "," + csv_number(r.meta_lr) + "," +
         csv_number(r.train_loss) + "," + csv_number(r.val_soft_miou) + "," +
         csv_number(r.val_miou_0_5) + "," + csv_number(r.val_miou_0_35) + "," + sec;
}

}  // namespace detail

inline Dataset build_dataset(const RunConfig& cfg) {
  if (cfg.dataset_kind == "disk") return load_dataset(cfg.dataset_path, cfg.dataset_manifest);
  const int total = cfg.synth_train_classes + cfg.synth_val_classes + cfg.synth_test_classes;
  Dataset ds = synth_generate(total, cfg.synth_samples_per_class, cfg.image_size, cfg.synth_seed);
  ds.assign_splits(static_cast<size_t>(cfg.synth_train_classes),
                   static_cast<size_t>(cfg.synth_val_classes),
                   static_cast<size_t>(cfg.synth_test_classes));
  return ds;
}

// Adaptation as performed at evaluation time (no graph, eval_steps steps).
inline ParamSet<float> adapt_for_eval(const RunConfig& cfg, const TrainState& state,
                                      const Episode<float>& ep) {
  const ModelSpec spec = cfg.model_spec();
  InnerLoopConfig inner = cfg.inner();
  inner.steps = inner.effective_eval_steps();
  auto task = detail::episode_task<float>(spec, ep);
  const ParamSet<float>* alpha = state.alpha ? &*state.alpha : nullptr;
  return inner_adapt(state.theta, task.support_loss, inner, alpha, /*track_graph=*/false);
}

inline EvalTable evaluate_split(const RunConfig& cfg, const TrainState& state, const Dataset& ds,
                                Split split, int episodes, Rng rng) {
  const ModelSpec spec = cfg.model_spec();
  std::vector<EvalRecord> records;
  std::map<int, std::vector<EvalRecord>> by_class;
  for (int i = 0; i < episodes; ++i) {
    Episode<float> ep = sample_episode<float>(ds, split, rng, 1, cfg.eval_query);
    ParamSet<float> adapted = adapt_for_eval(cfg, state, ep);
    EvalRecord rec = episode_eval(spec, adapted, ep);
    records.push_back(rec);
    by_class[ep.class_id].push_back(rec);
  }
  EvalTable table;
  table.episodes = episodes;
  table.soft = summarize(records, &EvalRecord::soft_iou);
  table.at05 = summarize(records, &EvalRecord::iou_at_0_5);
  table.at035 = summarize(records, &EvalRecord::iou_at_0_35);
  std::vector<double> cs, c5, c35;
  for (const auto& [cls, recs] : by_class) {
    cs.push_back(summarize(recs, &EvalRecord::soft_iou).mean);
    c5.push_back(summarize(recs, &EvalRecord::iou_at_0_5).mean);
    c35.push_back(summarize(recs, &EvalRecord::iou_at_0_35).mean);
  }
  table.cls_soft = summarize(cs);
  table.cls05 = summarize(c5);
  table.cls035 = summarize(c35);
  return table;
}

inline void write_summary(const std::string& path, const RunConfig& cfg, const RunReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot write '" + path + "'");
  out << "algorithm = " << algorithm_name(cfg.algorithm) << "\n";
  out << "param_count = " << report.param_count << "\n";
  out << "epochs = " << report.rows.size() << "\n";
  out << "time_per_epoch_s = " << detail::csv_number(report.mean_epoch_seconds) << "\n";
  if (report.test) {
    const EvalTable& t = *report.test;
    auto put = [&](const char* key, const Summary& s) {
      out << key << " = " << detail::csv_number(s.mean) << "\n";
      out << key << "_ci = " << (s.has_ci ? detail::csv_number(s.ci95_half_width) : "n/a") << "\n";
    };
    out << "test.episodes = " << t.episodes << "\n";
    put("test.soft_miou", t.soft);
    put("test.miou_0_5", t.at05);
    put("test.miou_0_35", t.at035);
    put("test.perclass.soft_miou", t.cls_soft);
    put("test.perclass.miou_0_5", t.cls05);
    put("test.perclass.miou_0_35", t.cls035);
  }
}

// Meta-training loop: one epoch is ceil(train classes / meta_batch)
// meta-iterations, each class drawn once per epoch; per-epoch validation over
// the val split drives the plateau schedule and best checkpoints. On a
// non-finite loss the run aborts (exit path NumericError) with previously
// written checkpoints retained.
inline RunReport run_train(const RunConfig& cfg, const std::string& resume_path = "") {
  namespace fs = std::filesystem;
  cfg.validate();
  check_arg(!cfg.output_dir.empty(), "config: output_dir required for training");
  fs::create_directories(cfg.output_dir);
  const fs::path out_dir(cfg.output_dir);
  {
    std::ofstream cf(out_dir / "config.txt", std::ios::trunc);
    cf << serialize_config(cfg);
  }

  const ModelSpec spec = cfg.model_spec();
  Dataset ds = build_dataset(cfg);
  check_arg(!ds.classes_of(Split::train).empty(), "training split is empty");
  check_arg(!ds.classes_of(Split::val).empty(), "validation split is empty");

  TrainState state;
  if (!resume_path.empty()) {
    state = load_checkpoint(resume_path, cfg);
  } else {
    state.seed = cfg.seed;
    state.theta = build_params<float>(spec, cfg.seed);
    state.adam_theta = AdamWState<float>::like(state.theta);
    if (cfg.algorithm == Algorithm::metasgd) {
      state.alpha = state.theta.map([&](const std::string&, const Tensor<float>& t) {
        return Tensor<float>::full(t.shape(), static_cast<float>(cfg.metasgd_alpha_init));
      });
      state.adam_alpha = AdamWState<float>::like(*state.alpha);
    }
  }

  const fs::path csv_path = out_dir / "log.csv";
  const bool append = !resume_path.empty() && fs::exists(csv_path);
  std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) fail("cannot write '" + csv_path.string() + "'");
  if (!append)
    csv << "epoch,meta_lr,train_loss,val_soft_miou,val_miou_0_5,val_miou_0_35,seconds\n";

  RunReport report;
  report.param_count = count_params(spec);
  const InnerLoopConfig inner = cfg.inner();
  const ScheduleConfig sched = cfg.schedule_config();

  for (int64_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = schedule_lr(sched, static_cast<int>(epoch), state.val_history);

    Rng train_rng = detail::stream_for(state.seed, "train", epoch);
    Rng aug_rng = detail::stream_for(state.seed, "augment", epoch);
    EpochIter<float> iter(ds, Split::train, cfg.meta_batch, train_rng, 1, cfg.train_query);
    const AugmentPolicy policy;  // training split only

    double loss_acc = 0;
    size_t batches = 0;
    while (auto batch = iter.next()) {
      std::vector<Task<float>> tasks;
      tasks.reserve(batch->size());
      for (auto& ep : *batch) {
        for (auto& s : ep.support) s = augment(s, aug_rng, policy);
        for (auto& q : ep.query) q = augment(q, aug_rng, policy);
        tasks.push_back(detail::episode_task<float>(spec, ep));
      }
      MetaGradient<float> grad;
      switch (cfg.algorithm) {
        case Algorithm::maml: grad = maml_meta_grad(state.theta, tasks, inner); break;
        case Algorithm::fomaml: grad = fomaml_meta_grad(state.theta, tasks, inner); break;
        case Algorithm::metasgd:
          grad = metasgd_meta_grad(state.theta, *state.alpha, tasks, inner);
          break;
        case Algorithm::reptile: grad = reptile_meta_grad(state.theta, tasks, inner); break;
      }
      if (cfg.outer_optimizer == "sgd") {
        state.theta = sgd_step(state.theta, grad.theta, lr);
        if (grad.alpha) *state.alpha = sgd_step(*state.alpha, *grad.alpha, lr);
      } else {
        auto [theta2, adam2] = adamw_step(state.adam_theta, state.theta, grad.theta, lr,
                                          cfg.adamw, /*apply_decay=*/true);
        state.theta = std::move(theta2);
        state.adam_theta = std::move(adam2);
        if (grad.alpha) {
          auto [alpha2, adamA2] = adamw_step(*state.adam_alpha, *state.alpha, *grad.alpha, lr,
                                             cfg.adamw, /*apply_decay=*/false);
          *state.alpha = std::move(alpha2);
          state.adam_alpha = std::move(adamA2);
        }
      }
      if (state.alpha && cfg.metasgd_clamp_nonneg) {
        *state.alpha = state.alpha->map([](const std::string&, const Tensor<float>& t) {
          Tensor<float> c = t.clone_detached();
          for (auto& v : c.raw()) v = std::max(v, 0.0f);
          return c;
        });
      }
      loss_acc += grad.mean_loss;
      ++batches;
    }

    // validation pass: one episode per val class, no augmentation
    Rng val_rng = detail::stream_for(state.seed, "val", epoch);
    std::vector<EvalRecord> val_records;
    for (int cls : ds.classes_of(Split::val)) {
      Episode<float> ep = episode_for_class<float>(ds, cls, val_rng, 1, cfg.train_query);
      ParamSet<float> adapted = adapt_for_eval(cfg, state, ep);
      val_records.push_back(episode_eval(spec, adapted, ep));
    }

    EpochRow row;
    row.epoch = static_cast<int>(epoch);
    row.meta_lr = lr;
    row.train_loss = loss_acc / static_cast<double>(batches);
    row.val_soft_miou = summarize(val_records, &EvalRecord::soft_iou).mean;
    row.val_miou_0_5 = summarize(val_records, &EvalRecord::iou_at_0_5).mean;
    row.val_miou_0_35 = summarize(val_records, &EvalRecord::iou_at_0_35).mean;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.rows.push_back(row);
    report.mean_epoch_seconds += row.seconds;
    csv << detail::csv_row(row, cfg.log_wall_clock) << "\n";
    csv.flush();

    state.val_history.push_back(row.val_soft_miou);
    state.epoch = epoch + 1;
    if (row.val_soft_miou > state.best_metric) {
      state.best_metric = row.val_soft_miou;
      save_checkpoint((out_dir / "best.ckpt").string(), cfg, state);
    }
    if ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04lld.ckpt", static_cast<long long>(epoch + 1));
      save_checkpoint((out_dir / name).string(), cfg, state);
    }
  }
  if (!report.rows.empty())
    report.mean_epoch_seconds /= static_cast<double>(report.rows.size());

  if (cfg.eval_episodes > 0 && !ds.classes_of(Split::test).empty()) {
    report.test = evaluate_split(cfg, state, ds, Split::test, cfg.eval_episodes,
                                 detail::stream_for(state.seed, "test", 0));
  }
  write_summary((out_dir / "summary.txt").string(), cfg, report);
  return report;
}

// ---- feature export ------------------------------------------------------------------

inline void write_gray_pgm(const std::string& path, const Tensor<float>& map,
                           bool minmax_normalize) {
  const int64_t h = map.dim(0), w = map.dim(1);
  PnmImage img{w, h, 1, std::vector<uint8_t>(static_cast<size_t>(h * w))};
  float lo = map.data()[0], hi = map.data()[0];
  for (float v : map.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float range = hi > lo ? hi - lo : 1.0f;
  for (int64_t i = 0; i < h * w; ++i) {
    const float v = minmax_normalize ? (map.data()[i] - lo) / range : map.data()[i];
    img.pixels[static_cast<size_t>(i)] =
        static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  }
  write_pnm(path, img);
}

// Adapts on one support sample, captures the six layer-group feature maps,
// and writes them plus the thresholded predicted masks.
inline std::vector<std::string> export_features(const RunConfig& cfg, const TrainState& state,
                                                const Dataset& ds, int class_idx,
                                                int sample_idx, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const ModelSpec spec = cfg.model_spec();

  Episode<float> ep;
  ep.class_id = class_idx;
  ep.support.push_back(ds.sample<float>(class_idx, sample_idx));
  ParamSet<float> adapted = adapt_for_eval(cfg, state, ep);

  NoGradGuard ng;
  Tensor<float> image = stack_images(ep.support);
  std::vector<FeatureCapture<float>> captures;
  Tensor<float> logits = forward(spec, adapted, image, &captures);

  std::vector<std::string> written;
  int index = 1;
  for (const auto& cap : captures) {
    const std::string path =
        (fs::path(out_dir) / ("feature_" + std::to_string(index++) + "_" + cap.group + ".pgm"))
            .string();
    write_gray_pgm(path, cap.map, /*minmax_normalize=*/true);
    written.push_back(path);
  }

  Tensor<float> prob = softmax_channel(logits);
  const int64_t h = prob.dim(2), w = prob.dim(3);
  Tensor<float> fg = Tensor<float>::uninit({h, w});
  std::copy_n(prob.data().data() + h * w, h * w, fg.raw().data());
  for (double thresh : {0.5, 0.35}) {
    Tensor<float> mask = Tensor<float>::uninit({h, w});
    for (int64_t i = 0; i < h * w; ++i)
      mask.raw()[i] = fg.data()[i] >= static_cast<float>(thresh) ? 1.0f : 0.0f;
    char name[32];
    std::snprintf(name, sizeof(name), "mask_at_%s.pgm", thresh == 0.5 ? "0_5" : "0_35");
    const std::string path = (fs::path(out_dir) / name).string();
    write_gray_pgm(path, mask, /*minmax_normalize=*/false);
    written.push_back(path);
  }
  return written;
}

// ---- comparison ------------------------------------------------------------------------

struct CompareRow {
  std::string run_dir;
  std::string algorithm;
  double miou_0_5 = 0, miou_0_5_ci = 0;
  double miou_0_35 = 0, miou_0_35_ci = 0;
  double soft_miou = 0;
  double time_per_epoch = 0;
  int64_t param_count = 0;
  bool best = false;
};

inline std::vector<CompareRow> compare_runs(const std::vector<std::string>& run_dirs) {
  namespace fs = std::filesystem;
  check_arg(run_dirs.size() >= 2, "compare: need at least 2 completed runs");
  std::vector<std::string> missing;
  for (const auto& dir : run_dirs)
    if (!fs::exists(fs::path(dir) / "summary.txt"))
      missing.push_back((fs::path(dir) / "summary.txt").string());
  if (!missing.empty()) {
    std::string msg = "compare: missing run artifacts:";
    for (const auto& m : missing) msg += " " + m;
    fail(msg);
  }
  std::vector<CompareRow> rows;
  for (const auto& dir : run_dirs) {
    std::ifstream in(fs::path(dir) / "summary.txt");
    CompareRow row;
    row.run_dir = dir;
    std::string line;
    while (std::getline(in, line)) {
      const size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (value == "n/a") continue;
      if (key == "algorithm") row.algorithm = value;
      else if (key == "param_count") row.param_count = detail::parse_i64(value, key);
      else if (key == "time_per_epoch_s") row.time_per_epoch = detail::parse_double(value, key);
      else if (key == "test.miou_0_5") row.miou_0_5 = detail::parse_double(value, key);
      else if (key == "test.miou_0_5_ci") row.miou_0_5_ci = detail::parse_double(value, key);
      else if (key == "test.miou_0_35") row.miou_0_35 = detail::parse_double(value, key);
      else if (key == "test.miou_0_35_ci") row.miou_0_35_ci = detail::parse_double(value, key);
      else if (key == "test.soft_miou") row.soft_miou = detail::parse_double(value, key);
    }
    rows.push_back(row);
  }
  size_t best = 0;
  for (size_t i = 1; i < rows.size(); ++i)
    if (rows[i].miou_0_5 > rows[best].miou_0_5) best = i;
  rows[best].best = true;
  return rows;
}

inline std::string format_compare_table(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %-18s %-18s %-14s %-12s\n", "setting",
                "mIoU (thresh=0.5)", "mIoU (thresh=0.35)", "time/epoch (s)", "params");
  os << line;
  for (const auto& r : rows) {
    char buf5[32], buf35[32];
    std::snprintf(buf5, sizeof(buf5), "%.4f +- %.4f", r.miou_0_5, r.miou_0_5_ci);
    std::snprintf(buf35, sizeof(buf35), "%.4f +- %.4f", r.miou_0_35, r.miou_0_35_ci);
    std::snprintf(line, sizeof(line), "%-24s %-18s %-18s %-14.2f %-12lld%s\n",
                  (std::string("metadrn-") + r.algorithm + (r.best ? " *" : "")).c_str(), buf5,
                  buf35, r.time_per_epoch, static_cast<long long>(r.param_count),
                  r.best ? "  (best)" : "");
    os << line;
  }
  return os.str();
}

inline std::string format_eval_table(const RunConfig& cfg, const EvalTable& t,
                                     double time_per_epoch, int64_t param_count) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %-18s %-18s %-14s %-12s\n", "setting",
                "mIoU (thresh=0.5)", "mIoU (thresh=0.35)", "time/epoch (s)", "params");
  os << line;
  char buf5[32], buf35[32];
  std::snprintf(buf5, sizeof(buf5), "%.4f +- %.4f", t.at05.mean, t.at05.ci95_half_width);
  std::snprintf(buf35, sizeof(buf35), "%.4f +- %.4f", t.at035.mean, t.at035.ci95_half_width);
  std::snprintf(line, sizeof(line), "%-24s %-18s %-18s %-14.2f %-12lld\n",
                (std::string("metadrn-") + algorithm_name(cfg.algorithm)).c_str(), buf5, buf35,
                time_per_epoch, static_cast<long long>(param_count));
  os << line;
  std::snprintf(line, sizeof(line),
                "soft mIoU: %.4f +- %.4f over %d episodes; per-class: %.4f +- %.4f over %d classes\n",
                t.soft.mean, t.soft.ci95_half_width, t.episodes, t.cls_soft.mean,
                t.cls_soft.ci95_half_width, t.cls_soft.n);
  os << line;
  return os.str();
}

}  // namespace metadrn
