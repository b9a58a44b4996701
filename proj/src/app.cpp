#include "cre/app.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "cre/errors.hpp"
#include "cre/gradcheck.hpp"
#include "cre/synthetic.hpp"
#include "cre/trainer.hpp"

namespace fs = std::filesystem;

namespace cre {

LoadedImages load_split_checked(const DatasetManifest& manifest, Split split,
                                std::size_t image_size, std::ostream& log) {
  auto loaded = load_split(manifest, split, image_size, image_size);
  for (const auto& f : loaded.failures) log << "warning: cannot decode " << f << "\n";
  if (loaded.failure_rate() > kMaxDecodeFailureRate) {
    throw ValidationError(to_string(split) + " split: " + std::to_string(loaded.failures.size()) +
                          " of " + std::to_string(loaded.failures.size() + loaded.images.size()) +
                          " images failed to decode");
  }
  if (loaded.images.empty()) throw ValidationError(to_string(split) + " split is empty");
  return loaded;
}

Codebook fit_tokenizer(std::span<const Image> images, const TokenizerSettings& settings,
                       std::uint64_t seed, KMeansReport* report) {
  const auto geometry = settings.geometry();
  const auto patches = sample_patches(images, geometry, settings.patches_per_image,
                                      derive_seed({seed, 0x70617463u}));
  return fit_codebook(patches, geometry, settings.codebook_size, seed, settings.kmeans(), report);
}

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool checkpoint_required = false) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)");
  cmd->add_option("--seed", o.seed, "Override the run seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--set", o.overrides, "Override a config key, e.g. train.lambda=0")
      ->allow_extra_args(false);
  auto* ck = cmd->add_option("--checkpoint", o.checkpoint,
                             checkpoint_required ? "Checkpoint to evaluate"
                                                 : "Checkpoint to resume from");
  if (checkpoint_required) ck->required();
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig config;
  if (!o.config.empty()) config = load_run_config(o.config);
  apply_overrides(config, o.overrides);
  if (o.seed) config.seed = *o.seed;
  if (!o.out.empty()) config.output_dir = o.out;
  config.validate();
  return config;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

void echo_config(const RunConfig& config) {
  write_text(fs::path(config.output_dir) / "config.json", config.to_json() + "\n");
}

DatasetManifest manifest_of(const RunConfig& config) {
  if (config.data.manifest.empty()) throw ValidationError("config: data.manifest is not set");
  return load_manifest(config.data.manifest);
}

ModelParameters<float> load_weights(const RunConfig& config, const std::string& checkpoint) {
  auto params = init_parameters<float>(config.model, config.seed);
  load_checkpoint(checkpoint, params, nullptr);
  params.set_requires_grad(false);
  return params;
}

void write_report(const RunConfig& config, const std::string& stem, const Metrics& test,
                  const Metrics& train, std::span<const std::string> names, std::ostream& out) {
  const fs::path dir(config.output_dir);
  write_text(dir / (stem + "_metrics.json"), test.to_json(names) + "\n");
  write_text(dir / (stem + "_metrics.txt"), test.to_table(names));
  write_text(dir / (stem + "_train_metrics.json"), train.to_json(names) + "\n");
  out << test.to_table(names);
  out << std::fixed << std::setprecision(4) << stem << ": test top1 " << test.top1
      << "  macro_f1 " << test.macro_f1 << "  train top1 " << train.top1 << "\n";
}

int cmd_make_synthetic(const fs::path& root, const SyntheticOptions& options, std::ostream& out) {
  const auto m = write_synthetic_corpus(root, options);
  out << "wrote " << m.records.size() << " images (" << m.count(Split::kPretrain)
      << " pretrain, " << m.count(Split::kTest) << " test) and " << (root / "manifest.jsonl").string()
      << "\n";
  return kExitOk;
}

int cmd_make_manifest(const fs::path& root, fs::path output, double ratio, std::uint64_t seed,
                      std::ostream& out) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("--ratio must be in (0, 1]");
  auto m = split_by_class(make_manifest_from_directory(root), ratio, seed);
  if (output.empty()) output = root / "manifest.jsonl";
  save_manifest(output, m);
  out << "wrote " << output.string() << ": " << m.records.size() << " images in "
      << m.num_classes() << " classes (" << m.count(Split::kPretrain) << " pretrain, "
      << m.count(Split::kTest) << " test)\n";
  return kExitOk;
}

int cmd_fit_tokenizer(const RunConfig& config, std::ostream& out, std::ostream& err) {
  const auto manifest = manifest_of(config);
  const auto loaded = load_split_checked(manifest, Split::kPretrain, config.data.image_size, err);
  KMeansReport report;
  const auto codebook = fit_tokenizer(loaded.images, config.tokenizer, config.seed, &report);
  const auto path = config.codebook_path();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_codebook(path, codebook);
  echo_config(config);
  const auto patches = sample_patches(loaded.images, config.tokenizer.geometry(),
                                      config.tokenizer.patches_per_image,
                                      derive_seed({config.seed, 0x70617463u}));
  out << "codebook " << path.string() << " K=" << codebook.size() << " iterations "
      << report.iterations << (report.converged ? " (converged)" : "") << "\n";
  out << "quantization_error " << std::setprecision(9) << quantization_error(patches, codebook)
      << "\n";
  return kExitOk;
}

int cmd_pretrain(const RunConfig& config, const std::string& resume, std::ostream& out,
                 std::ostream& err) {
  const auto manifest = manifest_of(config);
  const auto codebook = load_codebook(config.codebook_path());
  if (codebook.size() != config.model.vocab_size) {
    throw ValidationError("codebook has K=" + std::to_string(codebook.size()) +
                          " but model.vocab_size is " + std::to_string(config.model.vocab_size));
  }
  const auto loaded = load_split_checked(manifest, Split::kPretrain, config.data.image_size, err);

  auto params = init_parameters<float>(config.model, config.seed);
  auto state = OptimizerState::for_parameters(params);
  if (!resume.empty()) load_checkpoint(resume, params, &state);

  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  echo_config(config);
  const auto config_json = config.to_json();
  std::ofstream log(dir / "log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw Error("cannot write " + (dir / "log.jsonl").string());

  PretrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) {
    log << to_json_line(r) << "\n";
    if (r.step % 10 == 0) {
      out << std::fixed << std::setprecision(4) << "step " << r.step << " epoch " << r.epoch
          << " reconstruction " << r.reconstruction << " contrastive " << r.contrastive
          << " combined " << r.combined << std::scientific << std::setprecision(3) << " lr "
          << r.lr << std::defaultfloat << "\n";
    }
  };
  hooks.on_checkpoint = [&](std::uint64_t step) {
    log.flush();
    save_checkpoint(dir / ("checkpoint-" + std::to_string(step) + ".cre"), params, state,
                    config_json);
  };
  const auto result =
      pretrain(loaded.images, params, state, config.model, codebook, config.train, config.augment, hooks);
  log.flush();
  save_checkpoint(dir / "checkpoint.cre", params, state, config_json);
  out << "finished at step " << result.final_step << "; checkpoint "
      << (dir / "checkpoint.cre").string() << "\n";
  return kExitOk;
}

int cmd_probe(const RunConfig& config, const std::string& checkpoint, std::ostream& out,
              std::ostream& err) {
  const auto manifest = manifest_of(config);
  const auto codebook = load_codebook(config.codebook_path());
  const auto params = load_weights(config, checkpoint);
  const auto train = load_split_checked(manifest, Split::kPretrain, config.data.image_size, err);
  const auto test = load_split_checked(manifest, Split::kTest, config.data.image_size, err);
  const auto result = linear_probe(extract_features(train.images, params, config.model, codebook),
                                   train.labels,
                                   extract_features(test.images, params, config.model, codebook),
                                   test.labels, manifest.num_classes(), config.probe);
  for (const auto c : result.classes_missing_from_train) {
    err << "warning: class " << manifest.class_names[c] << " has no training samples\n";
  }
  fs::create_directories(config.output_dir);
  echo_config(config);
  write_report(config, "probe", result.test, result.train, manifest.class_names, out);
  return kExitOk;
}

int cmd_finetune(const RunConfig& config, const std::string& checkpoint, std::ostream& out,
                 std::ostream& err) {
  const auto manifest = manifest_of(config);
  const auto codebook = load_codebook(config.codebook_path());
  const auto params = load_weights(config, checkpoint);
  const auto train = load_split_checked(manifest, Split::kPretrain, config.data.image_size, err);
  const auto test = load_split_checked(manifest, Split::kTest, config.data.image_size, err);
  const auto result = finetune(train.images, train.labels, test.images, test.labels,
                               manifest.num_classes(), params, config.model, codebook,
                               config.finetune, config.augment);
  fs::create_directories(config.output_dir);
  echo_config(config);
  write_report(config, "finetune", result.test, result.train, manifest.class_names, out);
  return kExitOk;
}

int cmd_gradcheck(const GradCheckSuiteOptions& options, const std::string& fault,
                  std::ostream& out) {
  debug::inject_gradient_fault(fault);
  std::vector<GradCheckEntry> entries;
  try {
    entries = run_gradcheck_suite(options);
  } catch (...) {
    debug::inject_gradient_fault("");
    throw;
  }
  debug::inject_gradient_fault("");
  out << std::left << std::setw(30) << "check" << std::right << std::setw(14) << "max_rel_error"
      << std::setw(12) << "tolerance" << std::setw(7) << "seeds" << "  result\n";
  for (const auto& e : entries) {
    out << std::left << std::setw(30) << e.name << std::right << std::scientific
        << std::setprecision(3) << std::setw(14) << e.max_rel_error << std::setw(12)
        << e.tolerance << std::defaultfloat << std::setw(7) << e.seeds << "  "
        << (e.passed ? "PASS" : "FAIL") << "\n";
  }
  const bool ok = all_passed(entries);
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
  return ok ? kExitOk : kExitGradcheck;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive reconstruction pre-training on tokenized images", "cre"};
  app.require_subcommand(1);

  std::string root, manifest_out;
  SyntheticOptions synthetic;
  auto* make_synthetic = app.add_subcommand("make-synthetic", "Write the procedural texture corpus");
  make_synthetic->add_option("--out", root, "Corpus directory")->required();
  make_synthetic->add_option("--images", synthetic.images, "Number of images");
  make_synthetic->add_option("--size", synthetic.size, "Image side in pixels");
  make_synthetic->add_option("--noise", synthetic.noise, "Per-pixel noise");
  make_synthetic->add_option("--seed", synthetic.seed, "Seed");
  make_synthetic->add_flag("--separable", synthetic.colour_by_class,
                           "Fix one colour per class so that classes are linearly separable");

  double ratio = 0.8;
  std::uint64_t split_seed = 0;
  auto* make_manifest = app.add_subcommand("make-manifest", "Index root/<class>/<image> files");
  make_manifest->add_option("--root", root, "Image directory")->required();
  make_manifest->add_option("--out", manifest_out, "Manifest path (default root/manifest.jsonl)");
  make_manifest->add_option("--ratio", ratio, "Pretrain fraction per class");
  make_manifest->add_option("--seed", split_seed, "Split seed");

  CommonOptions common;
  auto* fit = app.add_subcommand("fit-tokenizer", "Fit the patch codebook on the pretrain split");
  add_common(fit, common);
  auto* train = app.add_subcommand("pretrain", "Pre-train the encoder-decoder");
  add_common(train, common);
  auto* probe = app.add_subcommand("probe", "Linear probe on frozen features");
  add_common(probe, common, true);
  auto* tune = app.add_subcommand("finetune", "Fine-tune encoder and head");
  add_common(tune, common, true);

  GradCheckSuiteOptions gc;
  std::string fault;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gradcheck->add_option("--seeds", gc.seeds, "Random draws per op");
  gradcheck->add_option("--seed", gc.base_seed, "Base seed");
  gradcheck->add_option("--inject-fault", fault)->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (make_synthetic->parsed()) return cmd_make_synthetic(root, synthetic, out);
    if (make_manifest->parsed()) return cmd_make_manifest(root, manifest_out, ratio, split_seed, out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc, fault, out);
    const auto config = resolve(common);
    if (fit->parsed()) return cmd_fit_tokenizer(config, out, err);
    if (train->parsed()) return cmd_pretrain(config, common.checkpoint, out, err);
    if (probe->parsed()) return cmd_probe(config, common.checkpoint, out, err);
    if (tune->parsed()) return cmd_finetune(config, common.checkpoint, out, err);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace cre
