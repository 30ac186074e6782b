#include "restune/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "restune/errors.hpp"

namespace restune {

std::string_view to_string(SyntheticVariant v) {
  switch (v) {
    case SyntheticVariant::Plain: return "plain";
    case SyntheticVariant::TransferA: return "transfer_a";
    case SyntheticVariant::TransferB: return "transfer_b";
  }
  return "?";
}

SyntheticVariant parse_variant(std::string_view text) {
  for (auto v : {SyntheticVariant::Plain, SyntheticVariant::TransferA, SyntheticVariant::TransferB}) {
    if (text == to_string(v)) return v;
  }
  throw ConfigError("unknown data variant '" + std::string(text) + "' (expected plain, transfer_a or transfer_b)");
}

std::vector<AttachSpec> RunConfig::attach_specs() const {
  std::vector<AttachSpec> out;
  for (const TunerEntry& e : tuners) {
    if (!e.blocks) {
      for (std::size_t b = 0; b < backbone.depth; ++b) out.push_back({b, e.op, e.tuner});
    } else {
      for (std::size_t b : *e.blocks) out.push_back({b, e.op, e.tuner});
    }
  }
  return out;
}

void RunConfig::require(std::initializer_list<const char*> sections) const {
  for (std::string_view s : sections) {
    const bool present = (s == "backbone" && has_backbone) || (s == "train" && has_train) ||
                         (s == "data" && has_data) || (s == "output" && has_output) ||
                         (s == "tuner" && !tuners.empty()) || (s == "pretrain" && pretrain.has_value());
    if (!present) throw ConfigError("config is missing required section [" + std::string(s) + "]");
  }
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

class Parser {
 public:
  explicit Parser(std::string origin) : origin_(std::move(origin)) {}

  RunConfig run(const std::string& text) {
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
      ++line_;
      std::string_view view(raw);
      if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
      const std::string body = trim(view);
      if (body.empty()) continue;
      if (body.front() == '[') {
        if (body.back() != ']') fail("malformed section header '" + body + "'");
        open_section(trim(std::string_view(body).substr(1, body.size() - 2)));
        continue;
      }
      const auto eq = body.find('=');
      if (eq == std::string::npos) fail("expected 'key = value', got '" + body + "'");
      const std::string key = trim(std::string_view(body).substr(0, eq));
      const std::string value = trim(std::string_view(body).substr(eq + 1));
      if (key.empty()) fail("empty key");
      if (section_.empty()) fail("key '" + key + "' appears before any section");
      set(key, value);
    }
    finish();
    return std::move(cfg_);
  }

 private:
  using Setter = std::function<void(const std::string&)>;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(origin_ + ":" + std::to_string(line_) + ": " + msg);
  }

  template <typename T>
  T integer(const std::string& key, const std::string& v) const {
    T out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
      fail("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
  }
  double real(const std::string& key, const std::string& v) const {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
      fail("key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
  }
  bool boolean(const std::string& key, const std::string& v) const {
    if (v == "true") return true;
    if (v == "false") return false;
    fail("key '" + key + "': expected true or false, got '" + v + "'");
  }

  Setter size_field(std::size_t& f) {
    return [this, &f](const std::string& v) { f = integer<std::size_t>(key_, v); };
  }
  Setter u64_field(std::uint64_t& f) {
    return [this, &f](const std::string& v) { f = integer<std::uint64_t>(key_, v); };
  }
  Setter real_field(double& f) {
    return [this, &f](const std::string& v) { f = real(key_, v); };
  }
  Setter bool_field(bool& f) {
    return [this, &f](const std::string& v) { f = boolean(key_, v); };
  }
  template <typename Fn>
  Setter parsed(Fn fn) {
    return [this, fn](const std::string& v) {
      try {
        fn(v);
      } catch (const ConfigError& e) {
        fail("key '" + key_ + "': " + e.what());
      }
    };
  }

  void open_section(const std::string& name) {
    static const std::set<std::string> known{"backbone", "tuner", "train", "data", "pretrain", "output"};
    if (!known.contains(name)) fail("unknown section [" + name + "]");
    if (name != "tuner" && !seen_sections_.insert(name).second) fail("duplicate section [" + name + "]");
    section_ = name;
    seen_keys_.clear();
    setters_.clear();
    if (name == "backbone") {
      cfg_.has_backbone = true;
      auto& b = cfg_.backbone;
      setters_ = {{"dim", size_field(b.dim)},         {"depth", size_field(b.depth)},
                  {"heads", size_field(b.heads)},     {"patch", size_field(b.patch)},
                  {"image", size_field(b.image_size)}, {"channels", size_field(b.in_channels)},
                  {"classes", size_field(b.num_classes)}, {"mlp_ratio", size_field(b.mlp_ratio)},
                  {"qkv_bias", bool_field(b.qkv_bias)}, {"seed", u64_field(b.seed)}};
    } else if (name == "tuner") {
      cfg_.tuners.emplace_back();
      // Pointers into the vector stay valid: setters are rebuilt per section.
      auto& e = cfg_.tuners.back();
      auto& t = e.tuner;
      setters_ = {{"blocks", parsed([this, &e](const std::string& v) { e.blocks = parse_blocks(v); })},
                  {"op", parsed([&e](const std::string& v) { e.op = parse_attach_point(v); })},
                  {"kind", parsed([&t](const std::string& v) { t.kind = parse_tuner_kind(v); })},
                  {"rank", size_field(t.rank)},
                  {"heads", size_field(t.heads)},
                  {"qkv_bias", bool_field(t.qkv_bias)},
                  {"attn_drop", real_field(t.attn_drop)},
                  {"proj_drop", real_field(t.proj_drop)},
                  {"length", size_field(t.length)},
                  {"bottleneck", size_field(t.bottleneck)}};
      tuner_lines_.push_back(line_);
      tuner_has_kind_.push_back(false);
    } else if (name == "train") {
      cfg_.has_train = true;
      train_setters(cfg_.train);
    } else if (name == "pretrain") {
      cfg_.pretrain.emplace();
      auto& p = *cfg_.pretrain;
      train_setters(p.train);
      setters_["variant"] = parsed([&p](const std::string& v) { p.variant = parse_variant(v); });
      setters_["size"] = size_field(p.size);
    } else if (name == "data") {
      cfg_.has_data = true;
      auto& d = cfg_.data;
      setters_ = {{"source", [&d](const std::string& v) { d.source = v; }},
                  {"path", [&d](const std::string& v) { d.path = v; }},
                  {"variant", parsed([&d](const std::string& v) { d.variant = parse_variant(v); })},
                  {"size", size_field(d.size)},
                  {"train", real_field(d.train_fraction)},
                  {"val", real_field(d.val_fraction)},
                  {"test", real_field(d.test_fraction)},
                  {"noise", real_field(d.noise)},
                  {"distractor", real_field(d.distractor)},
                  {"seed", u64_field(d.seed)}};
    } else if (name == "output") {
      cfg_.has_output = true;
      setters_ = {{"dir", [this](const std::string& v) { cfg_.output_dir = v; }}};
    }
  }

  void train_setters(TrainConfig& t) {
    setters_ = {{"optimizer", parsed([&t](const std::string& v) {
                   if (v == "adamw") t.optimizer = OptimizerKind::AdamW;
                   else if (v == "sgd") t.optimizer = OptimizerKind::SgdMomentum;
                   else throw ConfigError("expected adamw or sgd, got '" + v + "'");
                 })},
                {"lr", real_field(t.lr)},
                {"weight_decay", real_field(t.weight_decay)},
                {"momentum", real_field(t.momentum)},
                {"beta1", real_field(t.beta1)},
                {"beta2", real_field(t.beta2)},
                {"eps", real_field(t.adam_eps)},
                {"epochs", size_field(t.epochs)},
                {"batch_size", size_field(t.batch_size)},
                {"seed", u64_field(t.seed)},
                {"schedule", parsed([&t](const std::string& v) {
                   if (v == "cosine") t.schedule = LrSchedule::Cosine;
                   else if (v == "constant") t.schedule = LrSchedule::Constant;
                   else throw ConfigError("expected cosine or constant, got '" + v + "'");
                 })},
                {"label_smoothing", real_field(t.label_smoothing)},
                {"loader_threads", size_field(t.loader_threads)}};
  }

  std::vector<std::size_t> parse_blocks(const std::string& v) const {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(integer<std::size_t>(key_, trim(item)));
    if (out.empty()) fail("key 'blocks': empty block list");
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    key_ = key;
    const auto it = setters_.find(key);
    if (it == setters_.end()) fail("unknown key '" + key + "' in [" + section_ + "]");
    if (!seen_keys_.insert(key).second) fail("duplicate key '" + key + "' in [" + section_ + "]");
    if (section_ == "tuner" && key == "blocks" && value == "all") {
      cfg_.tuners.back().blocks.reset();
      return;
    }
    if (section_ == "tuner" && key == "kind") tuner_has_kind_.back() = true;
    it->second(value);
  }

  void finish() {
    auto& c = cfg_;
    for (std::size_t i = 0; i < c.tuners.size(); ++i) {
      line_ = tuner_lines_[i];
      if (!tuner_has_kind_[i]) fail("[tuner] section needs a 'kind' key");
      try {
        c.tuners[i].tuner.validate();
      } catch (const ConfigError& e) {
        fail(e.what());
      }
    }
    line_ = 0;
    auto wrap = [this](auto fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        throw ConfigError(origin_ + ": " + e.what());
      }
    };
    wrap([&] { c.backbone.validate(); });
    c.data.num_classes = c.backbone.num_classes;
    c.data.channels = c.backbone.in_channels;
    c.data.height = c.backbone.image_size;
    c.data.width = c.backbone.image_size;
    if (c.has_train) wrap([&] { c.train.validate(); });
    if (c.has_data) wrap([&] { c.data.validate(); });
    if (c.pretrain) wrap([&] { c.pretrain->train.validate(); });
  }

  std::string origin_;
  std::size_t line_ = 0;
  std::string section_;
  std::string key_;
  RunConfig cfg_;
  std::map<std::string, Setter> setters_;
  std::set<std::string> seen_keys_;
  std::set<std::string> seen_sections_;
  std::vector<std::size_t> tuner_lines_;
  std::vector<bool> tuner_has_kind_;
};

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& origin) { return Parser(origin).run(text); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string model_config_text(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs) {
  std::ostringstream out;
  out << "[backbone]\n"
      << "dim = " << cfg.dim << "\n"
      << "depth = " << cfg.depth << "\n"
      << "heads = " << cfg.heads << "\n"
      << "patch = " << cfg.patch << "\n"
      << "image = " << cfg.image_size << "\n"
      << "channels = " << cfg.in_channels << "\n"
      << "classes = " << cfg.num_classes << "\n"
      << "mlp_ratio = " << cfg.mlp_ratio << "\n"
      << "qkv_bias = " << (cfg.qkv_bias ? "true" : "false") << "\n"
      << "seed = " << cfg.seed << "\n";
  for (const AttachSpec& s : specs) {
    const TunerSpec& t = s.tuner;
    out << "\n[tuner]\n"
        << "blocks = " << s.block << "\n"
        << "op = " << to_string(s.op) << "\n"
        << "kind = " << to_string(t.kind) << "\n"
        << "rank = " << t.rank << "\n"
        << "heads = " << t.heads << "\n"
        << "qkv_bias = " << (t.qkv_bias ? "true" : "false") << "\n"
        << "attn_drop = " << fmt_double(t.attn_drop) << "\n"
        << "proj_drop = " << fmt_double(t.proj_drop) << "\n"
        << "length = " << t.length << "\n"
        << "bottleneck = " << t.bottleneck << "\n";
  }
  return out.str();
}

}  // namespace restune
