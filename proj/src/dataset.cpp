// SPDX-License-Identifier: Apache-2.0
#include "mmae/dataset.hpp"

#include "mmae/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace mmae {

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction,
                                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("split: fraction must lie in (0, 1)");
  }
  std::map<int, std::vector<int>> by_label;
  for (size_t i = 0; i < ds.items.size(); ++i) {
    by_label[ds.items[i].label].push_back(static_cast<int>(i));
  }
  for (auto& [label, idx] : by_label) {
    if (idx.size() < 2) {
      throw ContractError("split: stratification needs >= 2 items per class, class " +
                          std::to_string(label) + " has " + std::to_string(idx.size()));
    }
  }

  Dataset train, test;
  train.class_names = ds.class_names;
  test.class_names = ds.class_names;
  train.split_tag = "train";
  test.split_tag = "test";
  Rng master(seed);
  for (auto& [label, idx] : by_label) {
    Rng rng = master.derive(0x5911, static_cast<std::uint64_t>(label));
    std::vector<int> shuffled = idx;
    rng.shuffle(shuffled);
    const int keep = static_cast<int>(std::lround(train_fraction * shuffled.size()));
    for (size_t i = 0; i < shuffled.size(); ++i) {
      (static_cast<int>(i) < keep ? train : test).items.push_back(ds.items[shuffled[i]]);
    }
  }
  return {std::move(train), std::move(test)};
}

void write_dataset(const std::string& root, const Dataset& ds, bool append) {
  fs::create_directories(root);
  const fs::path manifest_path = fs::path(root) / "manifest.csv";
  std::ofstream manifest(manifest_path, append ? std::ios::app : std::ios::trunc);
  if (!manifest) throw IoError("cannot write manifest under " + root);
  if (!append) manifest << "path,label,split\n";
  std::map<int, int> counters;
  for (const DataItem& item : ds.items) {
    const std::string cls = ds.class_names[static_cast<size_t>(item.label)];
    fs::create_directories(fs::path(root) / cls);
    const int id = counters[item.label]++;
    std::ostringstream stem;
    stem << cls << "/" << ds.split_tag << std::setw(5) << std::setfill('0') << id;
    write_png((fs::path(root) / (stem.str() + ".png")).string(), item.images.rgb);
    write_png((fs::path(root) / (stem.str() + "_H.png")).string(), item.images.h_channel);
    write_png((fs::path(root) / (stem.str() + "_E.png")).string(), item.images.e_channel);
    manifest << stem.str() << ".png," << item.label << "," << ds.split_tag << "\n";
  }
}

Dataset load_dataset(const std::string& root, const std::string& split_filter) {
  const fs::path manifest_path = fs::path(root) / "manifest.csv";
  std::ifstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot read " + manifest_path.string());

  Dataset ds;
  ds.split_tag = split_filter;
  std::string line;
  std::getline(manifest, line);  // header
  if (line.rfind("path,label,split", 0) != 0) {
    throw FormatError("manifest header must be path,label,split");
  }
  std::map<int, std::string> names;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string path, label_str, split;
    if (!std::getline(row, path, ',') || !std::getline(row, label_str, ',') ||
        !std::getline(row, split, ',')) {
      throw FormatError("malformed manifest row: " + line);
    }
    if (!split_filter.empty() && split != split_filter) continue;
    DataItem item;
    item.label = std::stoi(label_str);
    const fs::path rgb = fs::path(root) / path;
    fs::path stem = rgb;
    stem.replace_extension();
    item.images.rgb = read_png(rgb.string());
    const std::string h_path = stem.string() + "_H.png";
    const std::string e_path = stem.string() + "_E.png";
    if (fs::exists(h_path) && fs::exists(e_path)) {
      item.images.h_channel = read_png(h_path);
      item.images.e_channel = read_png(e_path);
    }
    names[item.label] = fs::path(path).begin()->string();
    ds.items.push_back(std::move(item));
  }
  if (!names.empty()) {
    ds.class_names.resize(static_cast<size_t>(names.rbegin()->first) + 1);
    for (auto& [label, name] : names) ds.class_names[static_cast<size_t>(label)] = name;
  }
  return ds;
}

}  // namespace mmae
