#pragma once
// CSV and SVG emitters for the report command.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "stainforge/trainer.hpp"

namespace stainforge::report {

struct Curve {
  std::string label;
  TrainLog log;
};

/// Long format: label,iter,epoch,reco,reco_smooth,total.
void write_curves_csv(const std::vector<Curve>& curves, int window,
                      const std::filesystem::path& path);
/// One smoothed reconstruction-loss polyline per curve.
void write_curves_svg(const std::vector<Curve>& curves, int window,
                      const std::filesystem::path& path);
/// label,steps,initial,final,ratio,step_variance over epochs <= max_epoch.
void write_curve_summary(const std::vector<Curve>& curves, int window, int max_epoch,
                         const std::filesystem::path& path);

void write_metrics_csv(const std::vector<std::pair<std::string, EvalReport>>& rows,
                       const std::filesystem::path& path);
/// Grouped bars of AUC, precision, recall and accuracy per row.
void write_metrics_svg(const std::vector<std::pair<std::string, EvalReport>>& rows,
                       const std::filesystem::path& path);

}  // namespace stainforge::report
