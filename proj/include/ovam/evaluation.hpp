#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovam/dataset.hpp"
#include "ovam/mask.hpp"

namespace ovam {

struct IouCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;

  /// tp / (tp + fp + fn); an empty union counts as a perfect match.
  double iou() const {
    const auto denom = tp + fp + fn;
    return denom ? static_cast<double>(tp) / static_cast<double>(denom) : 1.0;
  }
  bool empty_union() const { return tp + fp + fn == 0; }

  IouCounts& operator+=(const IouCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const IouCounts&, const IouCounts&) = default;
};

inline IouCounts iou_counts(const MaskGrid& pred, const MaskGrid& gt) {
  require(pred.width == gt.width && pred.height == gt.height, ErrorKind::dimension,
          "prediction " + dims_string(pred.width, pred.height) + " vs ground truth " + dims_string(gt.width, gt.height));
  IouCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

inline IouCounts iou(const BinaryMask& pred, const BinaryMask& gt) { return iou_counts(pred.grid, gt.grid); }

struct ClassScore {
  IouCounts counts;
  std::size_t n_images = 0;
  double iou = 0.0;
  bool empty_union = false;
};

struct EvalReport {
  std::vector<std::string> classes;  // column order
  std::map<std::string, ClassScore> per_class;
  double miou = 0.0;
  std::size_t classes_scored = 0;
  std::vector<std::string> missing_ground_truth;  // entry ids
  std::vector<std::string> warnings;

  bool complete() const { return missing_ground_truth.empty(); }
};

/// Counts are summed per class over every kept entry, then IoU is taken from
/// the totals; mIoU averages the classes that have at least one image.
/// Ground truth for entry `id` is gt_dir/<id>.png (non-zero = class).
inline EvalReport evaluate_dataset(const DatasetManifest& manifest, const std::filesystem::path& dataset_dir,
                                   const std::filesystem::path& gt_dir, std::vector<std::string> class_list = {}) {
  EvalReport r;
  if (class_list.empty())
    for (const auto& e : manifest.entries)
      if (std::find(class_list.begin(), class_list.end(), e.cls) == class_list.end()) class_list.push_back(e.cls);
  r.classes = class_list;
  for (const auto& c : class_list) r.per_class[c];

  for (const auto& e : manifest.entries) {
    if (!e.kept) continue;
    auto it = r.per_class.find(e.cls);
    if (it == r.per_class.end()) continue;
    const auto gt_path = gt_dir / (e.id + ".png");
    if (!std::filesystem::exists(gt_path)) {
      r.missing_ground_truth.push_back(e.id);
      continue;
    }
    const auto pred = read_mask(dataset_dir / e.mask_path);
    const auto gt = read_mask(gt_path);
    it->second.counts += iou_counts(pred.grid, gt.grid);
    ++it->second.n_images;
  }

  double sum = 0.0;
  for (const auto& c : class_list) {
    auto& s = r.per_class[c];
    if (s.n_images == 0) {
      r.warnings.push_back("class '" + c + "' has no evaluated images and is left out of the mean");
      continue;
    }
    s.iou = s.counts.iou();
    s.empty_union = s.counts.empty_union();
    if (s.empty_union) r.warnings.push_back("class '" + c + "' has an empty union; IoU counted as 1");
    sum += s.iou;
    ++r.classes_scored;
  }
  r.miou = r.classes_scored ? sum / static_cast<double>(r.classes_scored) : 0.0;
  for (const auto& id : r.missing_ground_truth) r.warnings.push_back("missing ground truth for entry " + id);
  return r;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["classes"] = r.classes;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& c : r.classes) {
    const auto& s = r.per_class.at(c);
    nlohmann::ordered_json e;
    e["tp"] = s.counts.tp;
    e["fp"] = s.counts.fp;
    e["fn"] = s.counts.fn;
    e["n_images"] = s.n_images;
    e["iou"] = s.n_images ? nlohmann::ordered_json(s.iou) : nlohmann::ordered_json(nullptr);
    e["empty_union"] = s.empty_union;
    per[c] = e;
  }
  j["per_class"] = per;
  j["miou"] = r.miou;
  j["classes_scored"] = r.classes_scored;
  j["missing_ground_truth"] = r.missing_ground_truth;
  j["warnings"] = r.warnings;
  return j;
}

/// One column per class plus mIoU, values in percent with one decimal.
inline std::string report_table(const EvalReport& r, const std::string& row_label = "OVAM") {
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  std::vector<std::string> head{"method"}, row{row_label};
  for (const auto& c : r.classes) {
    head.push_back(c);
    const auto& s = r.per_class.at(c);
    row.push_back(s.n_images ? pct(s.iou) + (s.empty_union ? "*" : "") : "-");
  }
  head.push_back("mIoU");
  row.push_back(pct(r.miou));
  std::ostringstream os;
  for (int line = 0; line < 2; ++line) {
    const auto& cells = line == 0 ? head : row;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const std::size_t width = std::max(head[i].size(), row[i].size());
      os << (i ? " | " : "") << cells[i] << std::string(width - cells[i].size(), ' ');
    }
    os << "\n";
    if (line == 0) {
      for (std::size_t i = 0; i < head.size(); ++i)
        os << (i ? "-|-" : "") << std::string(std::max(head[i].size(), row[i].size()), '-');
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace ovam
