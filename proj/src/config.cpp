#include "cre/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cre/errors.hpp"

namespace cre {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokenizerSettings, codebook_size, patch,
                                                patches_per_image, max_iterations, tolerance)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSettings, manifest, image_size)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, vocab_size, seq_len, embed_dim,
                                                encoder_depth, decoder_depth, num_heads,
                                                mlp_ratio, contrastive_dim, temperature)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, base_lr, batch_size, total_epochs,
                                                warmup_epochs, lambda, mask_ratio, weight_decay,
                                                beta1, beta2, eps, checkpoint_every, max_steps)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, scale_min, scale_max, ratio_min,
                                                ratio_max, out_h, out_w, flip_prob)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeConfig, lr, epochs, batch_size,
                                                warmup_epochs, weight_decay, hidden_layers,
                                                hidden_dim, standardize)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FinetuneConfig, lr, epochs, batch_size,
                                                warmup_epochs, weight_decay, freeze_encoder,
                                                augment, standardize)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, output_dir, codebook, data,
                                                tokenizer, model, train, augment, probe, finetune)

namespace {

using nlohmann::json;

bool same_kind(const json& expected, const json& given) {
  if (expected.is_number_unsigned()) return given.is_number_unsigned();
  if (expected.is_number()) return given.is_number();
  return expected.type() == given.type();
}

std::string kind_name(const json& expected) {
  if (expected.is_number_unsigned()) return "a non-negative integer";
  if (expected.is_number()) return "a number";
  if (expected.is_boolean()) return "true or false";
  if (expected.is_string()) return "a string";
  return "an object";
}

// Checks `given` against the shape of the default document.
void check_against(const json& expected, const json& given, const std::string& path) {
  if (!same_kind(expected, given)) {
    throw ValidationError("config: " + (path.empty() ? std::string("document") : path) +
                          " must be " + kind_name(expected));
  }
  if (!expected.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const auto child = path.empty() ? key : path + "." + key;
    if (!expected.contains(key)) throw ValidationError("config: unknown key " + child);
    check_against(expected.at(key), value, child);
  }
}

RunConfig from_document(const json& doc) {
  const json defaults = RunConfig{};
  check_against(defaults, doc, "");
  RunConfig config = doc.get<RunConfig>();
  config.validate();
  return config;
}

// Section validators name themselves in their messages.
template <typename Fn>
void checked(Fn&& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  } catch (const ContractError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

}  // namespace

void RunConfig::validate() {
  train.seed = seed;
  probe.seed = seed;
  finetune.seed = seed;
  if (output_dir.empty()) throw ValidationError("config: output_dir must not be empty");
  checked([&] { model.validate(); });
  checked([&] { train.validate(); });
  checked([&] { augment.validate(); });
  checked([&] { probe.validate(); });
  checked([&] { finetune.validate(); });
  if (tokenizer.codebook_size == 0 || tokenizer.patch == 0 || tokenizer.patches_per_image == 0 ||
      tokenizer.max_iterations == 0) {
    throw ValidationError("config: tokenizer sizes must be positive");
  }
  if (!(tokenizer.tolerance >= 0.0)) throw ValidationError("config: tokenizer.tolerance must be >= 0");
  if (data.image_size == 0 || data.image_size % tokenizer.patch != 0) {
    throw ValidationError("config: data.image_size must be a positive multiple of tokenizer.patch");
  }
  if (model.vocab_size != tokenizer.codebook_size) {
    throw ValidationError("config: model.vocab_size must equal tokenizer.codebook_size");
  }
  const auto grid = data.image_size / tokenizer.patch;
  if (model.seq_len != grid * grid) {
    throw ValidationError("config: model.seq_len must be (data.image_size / tokenizer.patch)^2 = " +
                          std::to_string(grid * grid));
  }
  if (augment.out_h != data.image_size || augment.out_w != data.image_size) {
    throw ValidationError("config: augment.out_h and out_w must equal data.image_size");
  }
}

std::filesystem::path RunConfig::codebook_path() const {
  if (!codebook.empty()) return codebook;
  return std::filesystem::path(output_dir) / "codebook.creq";
}

std::string RunConfig::to_json() const { return json(*this).dump(2); }

RunConfig parse_run_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return from_document(doc);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  RunConfig config;
  try {
    config = parse_run_config(buffer.str());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!config.data.manifest.empty() && std::filesystem::path(config.data.manifest).is_relative()) {
    config.data.manifest = (path.parent_path() / config.data.manifest).lexically_normal().string();
  }
  return config;
}

namespace {

void assign(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ValidationError("override must look like key=value, got '" + std::string(assignment) + "'");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw ValidationError("config: unknown key " + key);
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

}  // namespace

void apply_overrides(RunConfig& config, std::span<const std::string> assignments) {
  json doc = config;
  for (const auto& a : assignments) assign(doc, a);
  config = from_document(doc);
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const std::string one(assignment);
  apply_overrides(config, std::span<const std::string>(&one, 1));
}

}  // namespace cre
