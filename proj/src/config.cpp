#include "mldg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mldg/error.hpp"
#include "mldg/rng.hpp"

namespace mldg {

using nlohmann::json;

namespace {

const char* to_string(InnerRule r) { return r == InnerRule::sgd ? "sgd" : "adamw"; }
const char* to_string(OuterRule r) { return r == OuterRule::sgd ? "sgd" : "adamw"; }

InnerRule inner_rule_from_string(const std::string& s) {
  if (s == "sgd") return InnerRule::sgd;
  if (s == "adamw") return InnerRule::adamw;
  fail(ErrorKind::config, "meta.inner_rule: expected sgd or adamw, got '" + s + "'");
}

OuterRule outer_rule_from_string(const std::string& s) {
  if (s == "sgd") return OuterRule::sgd;
  if (s == "adamw") return OuterRule::adamw;
  fail(ErrorKind::config, "optim.outer_rule: expected sgd or adamw, got '" + s + "'");
}

json artifact_json(const ArtifactSpec& a) {
  return {{"id", a.id},
          {"kind", to_string(a.kind)},
          {"harmonic", a.harmonic},
          {"band_start", a.band_start},
          {"band_width", a.band_width},
          {"ar_coeff", a.ar_coeff},
          {"amplitude", a.amplitude}};
}

json domain_json(const DomainSpec& d) {
  return {{"domain_id", d.domain_id},
          {"artifact", artifact_json(d.spoof_artifact)},
          {"shared_cue_strength", d.shared_cue_strength},
          {"n_spoof", d.n_spoof},
          {"n_bonafide", d.n_bonafide},
          {"noise_scale", d.noise_scale}};
}

json corpus_json(const CorpusSpec& spec) {
  json train = json::array();
  for (const auto& d : spec.train) train.push_back(domain_json(d));
  json held = json::array();
  for (const auto& d : spec.held_out) held.push_back(domain_json(d));
  return {{"seq_len", spec.seq_len},
          {"d_model", spec.d_model},
          {"dev_fraction", spec.dev_fraction},
          {"train", train},
          {"held_out", held}};
}

json to_json(const RunConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["method"] = to_string(c.method);
  j["model"] = {{"n_layers", c.model.n_layers}, {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},   {"d_ff", c.model.d_ff},
                {"seq_len", c.model.seq_len},   {"head_hidden", c.model.head_hidden}};
  j["adapter"] = {{"rank", c.options.rank ? json(*c.options.rank) : json(nullptr)},
                  {"freeze_base", c.options.freeze_base},
                  {"scale", c.options.lora_scale},
                  {"init_std", c.options.lora_init_std}};
  const MetaConfig& m = c.train.meta;
  j["meta"] = {{"inner_lr", m.inner_lr},
               {"meta_test_weight", m.meta_test_weight},
               {"n_meta_test", m.n_meta_test},
               {"per_domain_batch", m.per_domain_batch},
               {"n_pairs", m.n_pairs},
               {"inner_steps", m.inner_steps},
               {"inner_rule", to_string(m.inner_rule)},
               {"inner_persistent_state", m.inner_persistent_state},
               {"recompute_meta_train_grad", m.recompute_meta_train_grad}};
  j["optim"] = {{"outer_rule", to_string(c.train.outer_rule)},
                {"beta1", c.train.adamw.beta1},
                {"beta2", c.train.adamw.beta2},
                {"eps", c.train.adamw.eps},
                {"weight_decay", c.train.adamw.weight_decay},
                {"lr_min", c.train.schedule.lr_min},
                {"lr_max", c.train.schedule.lr_max},
                {"step_size", c.train.schedule.step_size}};
  j["training"] = {{"erm_batch", c.train.erm_batch},
                   {"max_epochs", c.train.max_epochs},
                   {"patience", c.train.patience}};
  j["seeds"] = c.seeds;
  j["data"] = {{"seed", c.data_seed},
               {"manifest", c.manifest ? json(*c.manifest) : json(nullptr)},
               {"corpus", corpus_json(c.corpus)}};
  json evals = json::array();
  for (const auto& e : c.eval_sets) evals.push_back({{"name", e.name}, {"manifest", e.manifest}});
  j["eval_sets"] = evals;
  if (c.reference) {
    j["reference"] = {{"n_layers", c.reference->n_layers},
                      {"d_model", c.reference->d_model},
                      {"n_targets", c.reference->n_targets},
                      {"head_params", c.reference->head_params}};
  } else {
    j["reference"] = nullptr;
  }
  j["out"] = c.out;
  return j;
}

// Strict reader over one JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorKind::config, label() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    out = convert<T>(j_.at(key), path(key));
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.contains(item.key())) fail(ErrorKind::config, "unknown config key '" + path(item.key()) + "'");
    }
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(ErrorKind::config, where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(ErrorKind::config, where + ": expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        fail(ErrorKind::config, where + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(ErrorKind::config, where + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(ErrorKind::config, where + ": expected a string");
    }
    return v.get<T>();
  }

 private:
  std::string label() const { return where_.empty() ? "config" : where_; }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

ArtifactSpec parse_artifact(const json& j, const std::string& where) {
  ArtifactSpec a;
  Reader r(j, where);
  r.get("id", a.id);
  std::string kind = to_string(a.kind);
  r.get("kind", kind);
  a.kind = artifact_kind_from_string(kind);
  r.get("harmonic", a.harmonic);
  r.get("band_start", a.band_start);
  r.get("band_width", a.band_width);
  r.get("ar_coeff", a.ar_coeff);
  r.get("amplitude", a.amplitude);
  r.finish();
  return a;
}

DomainSpec parse_domain(const json& j, const std::string& where) {
  DomainSpec d;
  Reader r(j, where);
  r.get("domain_id", d.domain_id);
  if (r.has("artifact")) d.spoof_artifact = parse_artifact(r.raw("artifact"), r.path("artifact"));
  r.get("shared_cue_strength", d.shared_cue_strength);
  r.get("n_spoof", d.n_spoof);
  r.get("n_bonafide", d.n_bonafide);
  r.get("noise_scale", d.noise_scale);
  r.finish();
  return d;
}

std::vector<DomainSpec> parse_domains(const json& j, const std::string& where) {
  if (!j.is_array()) fail(ErrorKind::config, where + ": expected an array");
  std::vector<DomainSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(parse_domain(j[i], where + "." + std::to_string(i)));
  return out;
}

CorpusSpec parse_corpus(const json& j, const std::string& where) {
  CorpusSpec spec = default_corpus_spec();
  Reader r(j, where);
  r.get("seq_len", spec.seq_len);
  r.get("d_model", spec.d_model);
  r.get("dev_fraction", spec.dev_fraction);
  if (r.has("train")) spec.train = parse_domains(r.raw("train"), r.path("train"));
  if (r.has("held_out")) spec.held_out = parse_domains(r.raw("held_out"), r.path("held_out"));
  r.finish();
  return spec;
}

void validate(const RunConfig& c) {
  c.model.validate();
  if (c.options.rank && (*c.options.rank < 1 || *c.options.rank > c.model.d_model)) {
    fail(ErrorKind::config, "adapter.rank must lie in 1.." + std::to_string(c.model.d_model));
  }
  if (c.seeds.empty()) fail(ErrorKind::config, "seeds must not be empty");
  std::set<std::uint64_t> seeds(c.seeds.begin(), c.seeds.end());
  if (seeds.size() != c.seeds.size()) fail(ErrorKind::config, "seeds must be distinct");
  std::set<std::string> names;
  for (const auto& e : c.eval_sets) {
    if (e.name.empty() || e.manifest.empty()) fail(ErrorKind::config, "eval_sets entries need a name and a manifest");
    if (e.name.find_first_of("/\\ \t") != std::string::npos) {
      fail(ErrorKind::config, "eval set name '" + e.name + "' must not contain slashes or spaces");
    }
    if (!names.insert(e.name).second) fail(ErrorKind::config, "duplicate eval set name '" + e.name + "'");
  }
  if (c.train.max_epochs < 1) fail(ErrorKind::config, "training.max_epochs must be >= 1");
  if (c.train.patience < 1) fail(ErrorKind::config, "training.patience must be >= 1");
  if (c.train.erm_batch < 1) fail(ErrorKind::config, "training.erm_batch must be >= 1");
  const auto& s = c.train.schedule;
  if (!(s.lr_min >= 0.0 && s.lr_max >= s.lr_min && s.step_size > 0.0)) {
    fail(ErrorKind::config, "optim: need 0 <= lr_min <= lr_max and step_size > 0");
  }
  const auto& m = c.train.meta;
  if (m.per_domain_batch < 1 || m.n_pairs < 1 || m.inner_steps < 1 || m.n_meta_test < 1 ||
      m.meta_test_weight < 0.0 || m.inner_lr < 0.0) {
    fail(ErrorKind::config, "meta: invalid settings (batch, pairs, steps, n_meta_test >= 1; weights >= 0)");
  }
  if (c.out.empty()) fail(ErrorKind::config, "out must not be empty");
}

RunConfig from_json(const json& j) {
  RunConfig c;
  Reader r(j, "");
  if (!r.has("schema_version")) fail(ErrorKind::config, "config: missing schema_version");
  int version = 0;
  r.get("schema_version", version);
  if (version != kConfigSchemaVersion) {
    fail(ErrorKind::config, "config: unsupported schema_version " + std::to_string(version));
  }
  std::string method = to_string(c.method);
  r.get("method", method);
  c.method = method_from_string(method);

  if (r.has("model")) {
    Reader m(r.raw("model"), "model");
    m.get("n_layers", c.model.n_layers);
    m.get("d_model", c.model.d_model);
    m.get("n_heads", c.model.n_heads);
    m.get("d_ff", c.model.d_ff);
    m.get("seq_len", c.model.seq_len);
    m.get("head_hidden", c.model.head_hidden);
    m.finish();
  }
  if (r.has("adapter")) {
    Reader a(r.raw("adapter"), "adapter");
    if (a.has("rank")) {
      const json& rank = a.raw("rank");
      if (rank.is_null()) {
        c.options.rank.reset();
      } else {
        c.options.rank = Reader::convert<int>(rank, "adapter.rank");
      }
    }
    a.get("freeze_base", c.options.freeze_base);
    a.get("scale", c.options.lora_scale);
    a.get("init_std", c.options.lora_init_std);
    a.finish();
  }
  if (r.has("meta")) {
    MetaConfig& mc = c.train.meta;
    Reader m(r.raw("meta"), "meta");
    m.get("inner_lr", mc.inner_lr);
    m.get("meta_test_weight", mc.meta_test_weight);
    m.get("n_meta_test", mc.n_meta_test);
    m.get("per_domain_batch", mc.per_domain_batch);
    m.get("n_pairs", mc.n_pairs);
    m.get("inner_steps", mc.inner_steps);
    std::string rule = to_string(mc.inner_rule);
    m.get("inner_rule", rule);
    mc.inner_rule = inner_rule_from_string(rule);
    m.get("inner_persistent_state", mc.inner_persistent_state);
    m.get("recompute_meta_train_grad", mc.recompute_meta_train_grad);
    m.finish();
  }
  if (r.has("optim")) {
    Reader o(r.raw("optim"), "optim");
    std::string rule = to_string(c.train.outer_rule);
    o.get("outer_rule", rule);
    c.train.outer_rule = outer_rule_from_string(rule);
    o.get("beta1", c.train.adamw.beta1);
    o.get("beta2", c.train.adamw.beta2);
    o.get("eps", c.train.adamw.eps);
    o.get("weight_decay", c.train.adamw.weight_decay);
    o.get("lr_min", c.train.schedule.lr_min);
    o.get("lr_max", c.train.schedule.lr_max);
    o.get("step_size", c.train.schedule.step_size);
    o.finish();
  }
  if (r.has("training")) {
    Reader t(r.raw("training"), "training");
    t.get("erm_batch", c.train.erm_batch);
    t.get("max_epochs", c.train.max_epochs);
    t.get("patience", c.train.patience);
    t.finish();
  }
  if (r.has("seeds")) {
    const json& s = r.raw("seeds");
    if (!s.is_array()) fail(ErrorKind::config, "seeds: expected an array");
    c.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) {
      c.seeds.push_back(Reader::convert<std::uint64_t>(s[i], "seeds." + std::to_string(i)));
    }
  }
  if (r.has("data")) {
    Reader d(r.raw("data"), "data");
    d.get("seed", c.data_seed);
    if (d.has("manifest")) {
      const json& mf = d.raw("manifest");
      if (mf.is_null()) {
        c.manifest.reset();
      } else {
        c.manifest = Reader::convert<std::string>(mf, "data.manifest");
      }
    }
    if (d.has("corpus")) c.corpus = parse_corpus(d.raw("corpus"), "data.corpus");
    d.finish();
  }
  if (r.has("eval_sets")) {
    const json& e = r.raw("eval_sets");
    if (!e.is_array()) fail(ErrorKind::config, "eval_sets: expected an array");
    for (std::size_t i = 0; i < e.size(); ++i) {
      Reader er(e[i], "eval_sets." + std::to_string(i));
      EvalSetRef ref;
      er.get("name", ref.name);
      er.get("manifest", ref.manifest);
      er.finish();
      c.eval_sets.push_back(ref);
    }
  }
  if (r.has("reference")) {
    const json& ref = r.raw("reference");
    if (!ref.is_null()) {
      ReferenceScale s;
      Reader rr(ref, "reference");
      rr.get("n_layers", s.n_layers);
      rr.get("d_model", s.d_model);
      rr.get("n_targets", s.n_targets);
      rr.get("head_params", s.head_params);
      rr.finish();
      c.reference = s;
    }
  }
  r.get("out", c.out);
  r.finish();
  c.train.method = c.method;
  validate(c);
  return c;
}

json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, where + ": invalid JSON: " + e.what());
  }
}

}  // namespace

std::string to_canonical_text(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

RunConfig parse_config_text(const std::string& text) {
  try {
    return from_json(parse_json(text, "config"));
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("config: ") + e.what());
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::config, "cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig c = parse_config_text(ss.str());
  resolve_paths(c, std::filesystem::absolute(path).parent_path());
  return c;
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os << to_canonical_text(config);
  if (!os) fail(ErrorKind::io, "write failed: " + path.string());
}

namespace {

void assign_path(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    fail(ErrorKind::config, "override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(parts[i]);
      } catch (const std::exception&) {
        fail(ErrorKind::config, "override '" + key + "': '" + parts[i] + "' is not an index");
      }
      if (idx >= node->size()) fail(ErrorKind::config, "override '" + key + "': index out of range");
      node = &(*node)[idx];
    } else if (node->is_object()) {
      if (!node->contains(parts[i])) fail(ErrorKind::config, "override '" + key + "': unknown key");
      node = &(*node)[parts[i]];
    } else {
      fail(ErrorKind::config, "override '" + key + "': cannot descend into a scalar");
    }
  }
  *node = value;
}

}  // namespace

void apply_override(RunConfig& config, const std::string& assignment) {
  apply_overrides(config, {assignment});
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  json j = to_json(config);
  for (const auto& a : assignments) assign_path(j, a);
  config = from_json(j);
}

void resolve_paths(RunConfig& config, const std::filesystem::path& base) {
  auto fix = [&](std::string& p) {
    std::filesystem::path fp(p);
    if (fp.is_relative()) p = (base / fp).lexically_normal().string();
  };
  if (config.manifest) fix(*config.manifest);
  for (auto& e : config.eval_sets) fix(e.manifest);
}

std::uint64_t config_hash(const RunConfig& config) {
  json j = to_json(config);
  j.erase("seeds");
  j.erase("out");
  j.erase("eval_sets");
  j.erase("reference");
  return fnv1a64(j.dump());
}

std::string corpus_spec_text(const CorpusSpec& spec) { return corpus_json(spec).dump(2) + "\n"; }

std::uint64_t corpus_spec_hash(const CorpusSpec& spec) { return fnv1a64(corpus_json(spec).dump()); }

}  // namespace mldg
