// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mmae/image.hpp"

#include <string>
#include <utility>
#include <vector>

namespace mmae {

struct DataItem {
  StainTriplet images;
  int label = 0;
  // Generator metadata, kept for oracle-style checks; empty/zero for data
  // loaded from disk.
  int nucleus_count = 0;
  Eigen::MatrixXd concentrations;  // ground-truth 2 x n, synthetic only
};

struct Dataset {
  std::vector<DataItem> items;
  std::vector<std::string> class_names;
  std::string split_tag;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  long size() const { return static_cast<long>(items.size()); }
};

// Stratified by label, disjoint, deterministic per seed. Per-class train
// counts are round(fraction * n_class).
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction,
                                          std::uint64_t seed);

// Directory layout <root>/<class_name>/<id>.png with _H/_E siblings and a
// manifest.csv of `path,label,split` rows. Append mode lets train and test
// splits share one root and manifest.
void write_dataset(const std::string& root, const Dataset& ds, bool append = false);
Dataset load_dataset(const std::string& root, const std::string& split_filter = "");

}  // namespace mmae
