#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "restune/checkpoint.hpp"
#include "restune/config.hpp"
#include "restune/data.hpp"
#include "restune/errors.hpp"
#include "restune/experiments.hpp"
#include "restune/model.hpp"
#include "restune/tape.hpp"
#include "restune/training.hpp"

namespace restune::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string with_commas(std::size_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.backbone.seed = seed;
  cfg.train.seed = seed;
  cfg.data.seed = seed;
  if (cfg.pretrain) cfg.pretrain->train.seed = seed;
}

void check_dataset_shape(const Dataset& data, const BackboneConfig& cfg, const std::string& what) {
  if (data.channels != cfg.in_channels || data.height != cfg.image_size || data.width != cfg.image_size) {
    throw ConfigError(what + " holds " + std::to_string(data.channels) + "x" + std::to_string(data.height) + "x" +
                      std::to_string(data.width) + " images, model expects " + std::to_string(cfg.in_channels) + "x" +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  if (data.num_classes != cfg.num_classes) {
    throw ConfigError(what + " has " + std::to_string(data.num_classes) + " classes, model has " +
                      std::to_string(cfg.num_classes));
  }
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(args.config);
  cfg.require({"backbone", "train", "data"});
  if (args.seed) apply_seed(cfg, *args.seed);
  const fs::path dir = args.out_dir.value_or(cfg.output_dir);
  fs::create_directories(dir);

  const DatasetSplits data = load_dataset(cfg.data);
  check_dataset_shape(data.train, cfg.backbone, "dataset");
  ModelGraph model = prepare_backbone(cfg.backbone, cfg.pretrain, cfg.data);
  attach(model, cfg.attach_specs());

  const fs::path metrics_path = dir / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("cannot write '" + metrics_path.string() + "'");
  TrainOptions options;
  options.val = &data.val;
  options.sink = [&](const EpochMetrics& m) {
    const std::string line = metrics_json_line(m);
    out << line << '\n';
    metrics << line << '\n';
  };
  train(model, data.train, cfg.train, options);
  metrics.close();

  const fs::path ckpt = dir / "model.rtck";
  save_checkpoint(model, ckpt.string());
  const fs::path eval_data = dir / "eval.rtds";
  save_binary_dataset(data.val.size() > 0 ? data.val : data.train, eval_data.string());
  err << "wrote " << metrics_path.string() << ", " << ckpt.string() << ", " << eval_data.string() << '\n';
  return kOk;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& data_path, bool json, std::ostream& out) {
  const ModelGraph model = load_checkpoint(checkpoint);
  const Dataset data = load_binary_dataset(data_path);
  check_dataset_shape(data, model.config, "dataset '" + data_path + "'");
  const EvalResult r = evaluate(model, data);
  if (json) {
    Json j;
    j["accuracy"] = r.accuracy;
    j["loss"] = r.loss;
    j["count"] = r.count;
    out << j.dump() << '\n';
  } else {
    out << "accuracy: " << fixed(r.accuracy, 6) << '\n'
        << "loss:     " << fixed(r.loss, 6) << '\n'
        << "count:    " << r.count << '\n';
  }
  return kOk;
}

// --- count-params --------------------------------------------------------------

struct Reference {
  std::size_t rank;
  std::size_t heads;
  double millions;
};

// Published Res-Attn counts on ViT-B/16 with the tuner at MHA of every block.
constexpr Reference kResAttnReferences[] = {{8, 8, 2.35}, {8, 4, 1.22}, {4, 4, 0.66}, {2, 4, 0.32}};
constexpr double kFullVitBMillions = 85.84;

bool is_vit_b16(const BackboneConfig& c) {
  const BackboneConfig v = vit_b16_config(c.num_classes);
  return c.dim == v.dim && c.depth == v.depth && c.heads == v.heads && c.patch == v.patch &&
         c.image_size == v.image_size && c.in_channels == v.in_channels && c.mlp_ratio == v.mlp_ratio;
}

std::optional<double> reference_count(const BackboneConfig& cfg, const std::vector<AttachSpec>& specs,
                                      const CountOptions& opts) {
  if (!is_vit_b16(cfg) || opts.include_head || opts.include_bias || specs.size() != cfg.depth) return std::nullopt;
  const TunerSpec& first = specs.front().tuner;
  for (const AttachSpec& s : specs) {
    if (s.op != AttachPoint::MHA || !(s.tuner == first) || s.tuner.kind != TunerKind::ResAttn) return std::nullopt;
  }
  for (const Reference& r : kResAttnReferences) {
    if (r.rank == first.rank && r.heads == first.heads) return r.millions;
  }
  return std::nullopt;
}

int cmd_count_params(const std::string& config, CountOptions opts, bool json, std::ostream& out) {
  const RunConfig cfg = load_run_config(config);
  cfg.require({"backbone"});
  ModelGraph model = build_backbone(cfg.backbone, {.materialize = false});
  const auto specs = cfg.attach_specs();
  attach(model, specs);
  const ParamCount counted = count_trainable_params(model, opts);
  const std::size_t analytic = analytic_trainable_params(cfg.backbone, specs, opts);
  const std::size_t all = count_all_params(model);
  const bool agree = counted.total == analytic;
  const auto reference = reference_count(cfg.backbone, specs, opts);
  const std::optional<double> full_reference =
      is_vit_b16(cfg.backbone) && specs.empty() ? std::optional<double>(kFullVitBMillions) : std::nullopt;
  auto deviation = [](double count, double ref_millions) { return (count / 1e6 - ref_millions) / ref_millions; };

  if (json) {
    Json j;
    j["include_head"] = opts.include_head;
    j["include_bias"] = opts.include_bias;
    Json comps = Json::array();
    for (const auto& [name, n] : counted.components) comps.push_back({{"name", name}, {"count", n}});
    j["components"] = comps;
    j["total"] = counted.total;
    j["analytic"] = analytic;
    j["agree"] = agree;
    j["all_parameters"] = all;
    if (reference) {
      j["reference_millions"] = *reference;
      j["deviation"] = deviation(static_cast<double>(counted.total), *reference);
    }
    if (full_reference) {
      j["full_reference_millions"] = *full_reference;
      j["full_deviation"] = deviation(static_cast<double>(all), *full_reference);
    }
    out << j.dump() << '\n';
  } else {
    std::size_t width = 12;
    for (const auto& c : counted.components) width = std::max(width, c.first.size() + 2);
    out << pad("component", width) << "trainable\n";
    for (const auto& [name, n] : counted.components) out << pad(name, width) << with_commas(n) << '\n';
    out << pad("total", width) << with_commas(counted.total) << "  ("
        << (opts.include_head ? "incl." : "excl.") << " head, " << (opts.include_bias ? "incl." : "excl.")
        << " tuner biases)\n";
    out << pad("analytic", width) << with_commas(analytic) << (agree ? "  (agrees)" : "  (MISMATCH)") << '\n';
    out << pad("all params", width) << with_commas(all) << '\n';
    if (reference) {
      out << "reference: " << fixed(*reference, 2) << "M, deviation "
          << fixed(100.0 * deviation(static_cast<double>(counted.total), *reference), 1) << "%\n";
    }
    if (full_reference) {
      out << "full model reference: " << fixed(*full_reference, 2) << "M, deviation "
          << fixed(100.0 * deviation(static_cast<double>(all), *full_reference), 1) << "%\n";
    }
  }
  return agree ? kOk : kCheckFailed;
}

// --- grad-check ----------------------------------------------------------------

int cmd_grad_check(const std::string& config, const GradCheckOptions& opts, bool corrupt, bool json,
                   std::ostream& out) {
  const RunConfig cfg = load_run_config(config);
  cfg.require({"backbone"});
  struct FaultGuard {
    explicit FaultGuard(bool on) { set_backward_fault(on ? BackwardFault::LinearWeightScale : BackwardFault::None); }
    ~FaultGuard() { set_backward_fault(BackwardFault::None); }
  } guard(corrupt);
  const GradCheckReport report = grad_check(cfg.backbone, cfg.attach_specs(), opts);

  if (json) {
    Json j;
    j["eps"] = report.eps;
    j["tol"] = report.tol;
    Json entries = Json::array();
    for (const auto& e : report.entries) {
      entries.push_back({{"name", e.name}, {"numel", e.numel}, {"rel_error", e.rel_error}, {"passed", e.passed}});
    }
    j["tensors"] = entries;
    j["passed"] = report.passed;
    out << j.dump() << '\n';
  } else {
    std::size_t width = 8;
    for (const auto& e : report.entries) width = std::max(width, e.name.size() + 2);
    std::ostringstream eps, tol;
    eps << report.eps;
    tol << report.tol;
    out << "grad check  eps=" << eps.str() << "  tol=" << tol.str() << '\n';
    out << pad("tensor", width) << pad("numel", 8) << pad("rel_error", 12) << "status\n";
    for (const auto& e : report.entries) {
      char rel[32];
      std::snprintf(rel, sizeof rel, "%.3e", e.rel_error);
      out << pad(e.name, width) << pad(std::to_string(e.numel), 8) << pad(rel, 12) << (e.passed ? "ok" : "FAIL")
          << '\n';
    }
    out << "result: " << (report.passed ? "PASS" : "FAIL") << '\n';
  }
  return report.passed ? kOk : kCheckFailed;
}

// --- matrix --------------------------------------------------------------------

Json grid_json(const std::vector<std::vector<MatrixCell>>& grid, const std::vector<std::string>& rows,
               const std::vector<std::string>& cols) {
  Json j;
  j["rows"] = rows;
  j["cols"] = cols;
  Json train = Json::array(), val = Json::array(), ident = Json::array(), frozen = Json::array(),
       params = Json::array();
  for (const auto& row : grid) {
    Json t = Json::array(), v = Json::array(), i = Json::array(), f = Json::array(), p = Json::array();
    for (const MatrixCell& c : row) {
      t.push_back(c.train_accuracy);
      v.push_back(c.val_accuracy ? Json(*c.val_accuracy) : Json(nullptr));
      i.push_back(c.zero_init_identity);
      f.push_back(c.frozen_intact);
      p.push_back(c.trainable_params);
    }
    train.push_back(t);
    val.push_back(v);
    ident.push_back(i);
    frozen.push_back(f);
    params.push_back(p);
  }
  j["train_accuracy"] = train;
  j["val_accuracy"] = val;
  j["zero_init_identity"] = ident;
  j["frozen_intact"] = frozen;
  j["trainable_params"] = params;
  return j;
}

void print_grid(std::ostream& out, const std::string& title, const std::string& corner,
                const std::vector<std::vector<MatrixCell>>& grid, const std::vector<std::string>& rows,
                const std::vector<std::string>& cols) {
  out << title << '\n' << pad(corner, 12);
  for (const auto& c : cols) out << pad(c, 16);
  out << '\n';
  for (std::size_t r = 0; r < grid.size(); ++r) {
    out << pad(rows[r], 12);
    for (const MatrixCell& c : grid[r]) {
      std::string cell = fixed(c.train_accuracy, 3);
      if (c.val_accuracy) cell += " (" + fixed(*c.val_accuracy, 3) + ")";
      out << pad(cell, 16);
    }
    out << '\n';
  }
}

int cmd_matrix(const std::string& config, bool json, std::ostream& out) {
  const RunConfig cfg = load_run_config(config);
  cfg.require({"backbone", "train", "data"});
  const DatasetSplits data = load_dataset(cfg.data);
  check_dataset_shape(data.train, cfg.backbone, "dataset");
  const ModelGraph base = prepare_backbone(cfg.backbone, cfg.pretrain, cfg.data);

  MatrixOptions options;
  options.train = cfg.train;
  options.threads = thread_budget();
  for (const TunerEntry& e : cfg.tuners) options.tuner_specs.emplace(e.tuner.kind, e.tuner);
  const AttachMatrix m = run_attach_matrix(base, data, options);

  std::vector<std::string> kinds, ops;
  for (TunerKind k : kMatrixKinds) kinds.emplace_back(to_string(k));
  for (AttachPoint o : kMatrixOps) ops.emplace_back(to_string(o));

  std::size_t cells = 0, identity = 0, intact = 0;
  for (const auto* grid : {&m.single, &m.dual}) {
    for (const auto& row : *grid) {
      for (const MatrixCell& c : row) {
        ++cells;
        identity += c.zero_init_identity ? 1 : 0;
        intact += c.frozen_intact ? 1 : 0;
      }
    }
  }
  const bool ok = identity == cells && intact == cells;

  if (json) {
    Json j;
    j["single"] = grid_json(m.single, kinds, ops);
    j["dual"] = grid_json(m.dual, kinds, kinds);
    j["cells"] = cells;
    j["zero_init_identity"] = identity;
    j["frozen_intact"] = intact;
    out << j.dump() << '\n';
  } else {
    print_grid(out, "single tuner: final train accuracy (val accuracy)", "kind \\ op", m.single, kinds, ops);
    out << '\n';
    print_grid(out, "dual tuner: final train accuracy (val accuracy)", "mha \\ ffn", m.dual, kinds, kinds);
    out << '\n'
        << "zero-init identity: " << identity << "/" << cells << " cells\n"
        << "frozen weights intact: " << intact << "/" << cells << " cells\n";
  }
  return ok ? kOk : kCheckFailed;
}

// --- transfer ------------------------------------------------------------------

int cmd_transfer(const std::string& config, bool json, std::ostream& out) {
  const RunConfig cfg = load_run_config(config);
  cfg.require({"backbone", "train", "data", "pretrain"});
  TransferOptions options;
  options.backbone = cfg.backbone;
  options.target = cfg.data;
  options.pretrain = *cfg.pretrain;
  options.tune = cfg.train;
  if (!cfg.tuners.empty()) {
    options.tuner = cfg.tuners.front().tuner;
    options.op = cfg.tuners.front().op;
  }
  const TransferResult r = run_transfer(options);
  if (json) {
    Json j;
    j["source_accuracy"] = r.source_accuracy;
    j["probe_accuracy"] = r.probe_accuracy;
    j["tuned_accuracy"] = r.tuned_accuracy;
    j["tuner"] = std::string(to_string(options.tuner.kind));
    out << j.dump() << '\n';
  } else {
    out << "source task accuracy (pretrained backbone): " << fixed(r.source_accuracy, 3) << '\n'
        << "target val accuracy, linear probe:          " << fixed(r.probe_accuracy, 3) << '\n'
        << "target val accuracy, " << pad(std::string(to_string(options.tuner.kind)) + ":", 22)
        << fixed(r.tuned_accuracy, 3) << '\n';
  }
  return kOk;
}

// --- make-data -----------------------------------------------------------------

int cmd_make_data(const std::string& config, const std::string& split, const std::string& path, std::ostream& err) {
  const RunConfig cfg = load_run_config(config);
  cfg.require({"backbone", "data"});
  const DatasetSplits data = load_dataset(cfg.data);
  const Dataset* chosen = split == "train" ? &data.train : split == "val" ? &data.val : &data.test;
  if (chosen->size() == 0) throw EmptyDatasetError("split '" + split + "' is empty");
  save_binary_dataset(*chosen, path);
  err << "wrote " << chosen->size() << " items to " << path << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Residual tuners on a frozen transformer backbone"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train tuners and head; write metrics and a checkpoint");
  train_cmd->add_option("--config", train_args.config, "Run config file")->required();
  train_cmd->add_option("--seed", train_args.seed, "Replace every seed in the config");
  train_cmd->add_option("--out", train_args.out_dir, "Output directory (default: [output] dir)");

  std::string checkpoint, data_path;
  bool json = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a binary dataset");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data_path)->required();
  eval_cmd->add_flag("--json", json, "Machine-readable output");

  std::string config;
  CountOptions count_opts;
  auto* count_cmd = app.add_subcommand("count-params", "Count trainable parameters");
  count_cmd->add_option("--config", config)->required();
  count_cmd->add_flag("--include-head", count_opts.include_head);
  count_cmd->add_flag("--include-bias", count_opts.include_bias);
  count_cmd->add_flag("--json", json);

  GradCheckOptions gc;
  bool corrupt = false;
  auto* gc_cmd = app.add_subcommand("grad-check", "Compare backward against central differences");
  gc_cmd->add_option("--config", config)->required();
  gc_cmd->add_option("--eps", gc.eps)->capture_default_str();
  gc_cmd->add_option("--tol", gc.tol)->capture_default_str();
  gc_cmd->add_flag("--corrupt-backward", corrupt, "Test fixture: perturb the linear weight gradient");
  gc_cmd->add_flag("--json", json);

  auto* matrix_cmd = app.add_subcommand("matrix", "Single and dual attach-point accuracy grids");
  matrix_cmd->add_option("--config", config)->required();
  matrix_cmd->add_flag("--json", json);

  auto* transfer_cmd = app.add_subcommand("transfer", "Linear probe versus tuner after source-task pretraining");
  transfer_cmd->add_option("--config", config)->required();
  transfer_cmd->add_flag("--json", json);

  std::string split = "val", out_path;
  auto* data_cmd = app.add_subcommand("make-data", "Write one split of the configured dataset");
  data_cmd->add_option("--config", config)->required();
  data_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  data_cmd->add_option("--out", out_path)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, out, err);
    if (*eval_cmd) return cmd_eval(checkpoint, data_path, json, out);
    if (*count_cmd) return cmd_count_params(config, count_opts, json, out);
    if (*gc_cmd) return cmd_grad_check(config, gc, corrupt, json, out);
    if (*matrix_cmd) return cmd_matrix(config, json, out);
    if (*transfer_cmd) return cmd_transfer(config, json, out);
    if (*data_cmd) return cmd_make_data(config, split, out_path, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ChecksumError& e) {
    err << "checksum error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kUsageError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsageError;
}

}  // namespace restune::cli
