// SPDX-License-Identifier: Apache-2.0
#include "mmae/synth.hpp"

#include "mmae/rng.hpp"

#include <cmath>

namespace mmae {

SynthSpec::SynthSpec() {
  w_true.col(0) = canonical_hematoxylin();
  w_true.col(1) = canonical_eosin();
}

void SynthSpec::validate() const {
  if (num_classes < 1) throw ConfigError("synth: need at least one class");
  if (image_size < 4) throw ConfigError("synth: image size too small");
  if (per_class < 1) throw ConfigError("synth: need at least one image per class");
  if (noise_std < 0) throw ConfigError("synth: negative noise");
  for (int j = 0; j < 2; ++j) {
    if (w_true.col(j).minCoeff() < 0 || std::abs(w_true.col(j).norm() - 1.0) > 1e-9) {
      throw ConfigError("synth: ground-truth stain vectors must be nonneg unit-norm");
    }
  }
}

std::vector<ClassSpec> default_class_specs() {
  std::vector<ClassSpec> specs(4);
  specs[0] = {"dense_small", 11.0, 15.0, 1.0, 1.6, 1.1, 1.6, 0.01, 0.03, 0.40, 0.50};
  specs[1] = {"sparse_large", 2.0, 3.5, 4.0, 5.5, 1.1, 1.6, 0.01, 0.03, 0.40, 0.50};
  specs[2] = {"stroma", 0.5, 1.5, 1.5, 2.5, 0.8, 1.2, 0.02, 0.05, 0.90, 1.30};
  specs[3] = {"mucus", 0.2, 0.8, 1.5, 2.5, 0.4, 0.7, 0.01, 0.04, 0.05, 0.12};
  return specs;
}

namespace {

DataItem render_image(const SynthSpec& spec, const ClassSpec& cls, int label, Rng rng) {
  const int size = spec.image_size;
  const long n = static_cast<long>(size) * size;

  const double wash_h = rng.uniform(cls.wash_hema_min, cls.wash_hema_max);
  const double wash_e = rng.uniform(cls.wash_eosin_min, cls.wash_eosin_max);
  const double density = rng.uniform(cls.density_min, cls.density_max);
  const int count = static_cast<int>(std::lround(density * n / 1000.0));

  Eigen::MatrixXd conc = Eigen::MatrixXd::Zero(2, n);
  conc.row(0).setConstant(wash_h);
  conc.row(1).setConstant(wash_e);

  for (int k = 0; k < count; ++k) {
    const double cx = rng.uniform(0.0, size);
    const double cy = rng.uniform(0.0, size);
    const double radius = rng.uniform(cls.radius_min, cls.radius_max);
    const double amp = rng.uniform(cls.nucleus_hema_min, cls.nucleus_hema_max);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + radius + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + radius + 1)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5 - cx) / radius;
        const double dy = (y + 0.5 - cy) / radius;
        const double falloff = 1.0 - (dx * dx + dy * dy);
        if (falloff > 0) {
          const long p = static_cast<long>(y) * size + x;
          conc(0, p) += amp * falloff;
          // Nuclei displace cytoplasm completely at the center: the eosin
          // concentration falls to zero there, which is also what keeps the
          // stain directions identifiable under the sparse fit.
          conc(1, p) *= 1.0 - falloff;
        }
      }
    }
  }
  conc = conc.cwiseMin(kMaxConcentration);

  const Eigen::Matrix3Xd od = spec.w_true * conc;
  DataItem item;
  item.label = label;
  item.nucleus_count = count;
  item.concentrations = conc;
  item.images.rgb = ImageU8(size, size);
  item.images.h_channel = ImageU8(size, size);
  item.images.e_channel = ImageU8(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const long p = static_cast<long>(y) * size + x;
      for (int c = 0; c < 3; ++c) {
        double intensity = 255.0 * std::exp(-od(c, p));
        if (spec.noise_std > 0) intensity += rng.normal() * spec.noise_std;
        item.images.rgb.at(x, y, c) = quantize_u8(intensity);
      }
      const std::uint8_t ih = quantize_u8(255.0 * std::exp(-conc(0, p)));
      const std::uint8_t ie = quantize_u8(255.0 * std::exp(-conc(1, p)));
      for (int c = 0; c < 3; ++c) {
        item.images.h_channel.at(x, y, c) = ih;
        item.images.e_channel.at(x, y, c) = ie;
      }
    }
  }
  return item;
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  std::vector<ClassSpec> classes = spec.classes.empty() ? default_class_specs() : spec.classes;
  if (static_cast<int>(classes.size()) < spec.num_classes) {
    throw ConfigError("synth: " + std::to_string(classes.size()) + " class specs for " +
                      std::to_string(spec.num_classes) + " classes");
  }
  classes.resize(static_cast<size_t>(spec.num_classes));

  Dataset ds;
  for (const ClassSpec& c : classes) ds.class_names.push_back(c.name);
  Rng master(spec.seed);
  for (int label = 0; label < spec.num_classes; ++label) {
    for (int i = 0; i < spec.per_class; ++i) {
      Rng img_rng = master.derive(0x531d, static_cast<std::uint64_t>(label),
                                  static_cast<std::uint64_t>(i));
      ds.items.push_back(render_image(spec, classes[static_cast<size_t>(label)], label, img_rng));
    }
  }
  return ds;
}

}  // namespace mmae
