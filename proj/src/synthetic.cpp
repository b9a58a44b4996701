#include "cre/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "cre/errors.hpp"
#include "cre/rng.hpp"

namespace fs = std::filesystem;

namespace cre {

namespace {

constexpr std::array<std::array<float, 3>, 8> kPalette{{
    {0.90f, 0.15f, 0.10f},
    {0.10f, 0.65f, 0.20f},
    {0.15f, 0.25f, 0.85f},
    {0.95f, 0.85f, 0.15f},
    {0.60f, 0.20f, 0.70f},
    {0.10f, 0.75f, 0.80f},
    {0.95f, 0.95f, 0.95f},
    {0.10f, 0.10f, 0.10f},
}};

double frac(double t) { return t - std::floor(t); }
bool half(double t) { return frac(t) < 0.5; }

struct Draw {
  double period, phase_y, phase_x, centre_y, centre_x;
};

// Whether pixel centre (y, x) takes the first colour.
bool foreground(std::size_t label, double y, double x, const Draw& d) {
  const double u = (x + d.phase_x) / d.period, v = (y + d.phase_y) / d.period;
  switch (label) {
    case 0: return half(u);
    case 1: return half(v);
    case 2: return half(u) != half(v);
    case 3: return half((u + v) * M_SQRT1_2) != half((u - v) * M_SQRT1_2);
    case 4: return std::abs(frac(u) - 0.5) < 0.25 && std::abs(frac(v) - 0.5) < 0.25;
    case 5: return half(std::hypot(y - d.centre_y, x - d.centre_x) / d.period);
    case 6: return std::abs(frac(u) - 0.5) < 0.15 || std::abs(frac(v) - 0.5) < 0.15;
    default: return std::abs(frac(u / 2) - 0.5) + std::abs(frac(v / 2) - 0.5) < 0.25;
  }
}

}  // namespace

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"vstripes", "hstripes", "checker", "diagchecker",
                                              "dots",     "rings",    "grid",    "diamonds"};
  return names;
}

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& options) {
  if (options.size == 0) throw ValidationError("synthetic: size must be positive");
  if (!(options.period_min > 0.0) || options.period_max < options.period_min) {
    throw ValidationError("synthetic: need 0 < period_min <= period_max");
  }
  if (!(options.noise >= 0.0)) throw ValidationError("synthetic: noise must be non-negative");
  const double side = static_cast<double>(options.size);
  SyntheticCorpus corpus;
  for (std::size_t n = 0; n < options.images; ++n) {
    const std::size_t label = n % kSyntheticClasses;
    Rng rng(derive_seed({options.seed, 0x73796eu, n}));
    auto first = rng.below(kPalette.size());
    if (options.colour_by_class) first = label % kPalette.size();
    auto second = rng.below(kPalette.size() - 1);
    if (second >= first) ++second;
    Draw d;
    d.period = options.period_min + (options.period_max - options.period_min) * rng.uniform();
    d.phase_y = d.period * rng.uniform();
    d.phase_x = d.period * rng.uniform();
    d.centre_y = side * (0.25 + 0.5 * rng.uniform());
    d.centre_x = side * (0.25 + 0.5 * rng.uniform());
    Image img = Image::zeros(options.size, options.size, 3);
    for (std::size_t y = 0; y < options.size; ++y) {
      for (std::size_t x = 0; x < options.size; ++x) {
        const bool on = foreground(label, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5, d);
        const auto& colour = kPalette[on ? first : second];
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = colour[c] + options.noise * rng.normal();
          img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    corpus.images.push_back(std::move(img));
    corpus.labels.push_back(label);
  }
  return corpus;
}

DatasetManifest write_synthetic_corpus(const fs::path& root, const SyntheticOptions& options) {
  const auto corpus = make_synthetic_corpus(options);
  const auto& names = synthetic_class_names();
  DatasetManifest m;
  m.base_dir = root;
  for (const auto& name : names) {
    m.intern(name);
    fs::create_directories(root / name);
  }
  for (std::size_t n = 0; n < corpus.images.size(); ++n) {
    char file[32];
    std::snprintf(file, sizeof file, "%05zu.ppm", n);
    const auto rel = fs::path(names[corpus.labels[n]]) / file;
    write_ppm(root / rel, corpus.images[n]);
    m.records.push_back({rel.generic_string(), corpus.labels[n], Split::kUnassigned});
  }
  m = split_by_class(m, 0.8, options.seed);
  save_manifest(root / "manifest.jsonl", m);
  return m;
}

}  // namespace cre
