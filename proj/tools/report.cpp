#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace stainforge::report {

namespace {

constexpr const char* kPalette[] = {"#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93",
                                    "#00798c"};

std::ofstream open(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

std::vector<double> reco_of(const TrainLog& log) {
  std::vector<double> v;
  v.reserve(log.records.size());
  for (const auto& r : log.records) v.push_back(r.reco);
  return v;
}

// Labels land in XML text nodes.
std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

void write_curves_csv(const std::vector<Curve>& curves, int window,
                      const std::filesystem::path& path) {
  auto os = open(path);
  os << "label,iter,epoch,reco,reco_smooth,total\n";
  char line[256];
  for (const auto& c : curves) {
    const auto reco = reco_of(c.log);
    const auto smooth = moving_average(reco, window);
    for (std::size_t i = 0; i < reco.size(); ++i) {
      const auto& r = c.log.records[i];
      std::snprintf(line, sizeof line, ",%ld,%d,%.17g,%.17g,%.17g\n", r.iter, r.epoch, reco[i],
                    smooth[i], r.total);
      os << c.label << line;
    }
  }
}

void write_curves_svg(const std::vector<Curve>& curves, int window,
                      const std::filesystem::path& path) {
  constexpr double kW = 720, kH = 420, kLeft = 70, kRight = 160, kTop = 30, kBottom = 50;
  std::vector<std::vector<double>> series;
  double y_max = 0.0;
  std::size_t x_max = 1;
  for (const auto& c : curves) {
    series.push_back(moving_average(reco_of(c.log), window));
    for (double v : series.back())
      if (std::isfinite(v)) y_max = std::max(y_max, v);
    x_max = std::max(x_max, series.back().size());
  }
  if (y_max <= 0.0) y_max = 1.0;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto sx = [&](std::size_t i) { return kLeft + pw * static_cast<double>(i) / x_max; };
  auto sy = [&](double v) { return kTop + ph * (1.0 - v / y_max); };

  auto os = open(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"18\">Reconstruction loss, " << window
     << "-step moving average</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw
     << "\" y2=\"" << kTop + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
     << kTop + ph << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = y_max * t / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(v) + 4 << "\" text-anchor=\"end\">"
       << num(v) << "</text>\n";
    const std::size_t i = x_max * t / 4;
    os << "<text x=\"" << sx(i) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
       << i << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10
     << "\" text-anchor=\"middle\">iteration</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* colour = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[k].size(); ++i)
      if (std::isfinite(series[k][i])) os << num(sx(i)) << ',' << num(sy(series[k][i])) << ' ';
    os << "\"/>\n";
    const double ly = kTop + 16.0 * (k + 1);
    os << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\""
       << kLeft + pw + 32 << "\" y2=\"" << ly - 4 << "\" stroke=\"" << colour
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << kLeft + pw + 38 << "\" y=\"" << ly << "\">" << escape(curves[k].label)
       << "</text>\n";
  }
  os << "</svg>\n";
}

void write_curve_summary(const std::vector<Curve>& curves, int window, int max_epoch,
                         const std::filesystem::path& path) {
  auto os = open(path);
  os << "label,steps,initial,final,ratio,step_variance\n";
  char line[256];
  for (const auto& c : curves) {
    const CurveSummary s = summarize_reco_curve(c.log, window, max_epoch);
    std::snprintf(line, sizeof line, ",%zu,%.17g,%.17g,%.17g,%.17g\n", s.steps, s.initial,
                  s.final, s.ratio, s.step_variance);
    os << c.label << line;
  }
}

void write_metrics_csv(const std::vector<std::pair<std::string, EvalReport>>& rows,
                       const std::filesystem::path& path) {
  auto os = open(path);
  os << "label,auc,precision,recall,accuracy,n_samples\n";
  char line[256];
  for (const auto& [label, r] : rows) {
    std::snprintf(line, sizeof line, ",%.17g,%.17g,%.17g,%.17g,%zu\n", r.auc, r.precision,
                  r.recall, r.accuracy, r.n_samples);
    os << label << line;
  }
}

void write_metrics_svg(const std::vector<std::pair<std::string, EvalReport>>& rows,
                       const std::filesystem::path& path) {
  constexpr double kLeft = 50, kTop = 30, kPlotH = 300, kBar = 14, kGap = 24;
  const char* names[] = {"AUC", "precision", "recall", "accuracy"};
  const double group = 4 * kBar + kGap;
  const double w = kLeft + group * rows.size() + 140;
  const double h = kTop + kPlotH + 60;
  auto os = open(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + kPlotH << "\" x2=\""
     << kLeft + group * rows.size() << "\" y2=\"" << kTop + kPlotH << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t)
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + kPlotH * (1 - t / 4.0) + 4
       << "\" text-anchor=\"end\">" << num(t / 4.0) << "</text>\n";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k].second;
    const double vals[] = {r.auc, r.precision, r.recall, r.accuracy};
    const double x0 = kLeft + k * group + kGap / 2;
    for (int m = 0; m < 4; ++m) {
      const double bh = kPlotH * std::clamp(vals[m], 0.0, 1.0);
      os << "<rect x=\"" << x0 + m * kBar << "\" y=\"" << kTop + kPlotH - bh << "\" width=\""
         << kBar - 2 << "\" height=\"" << bh << "\" fill=\"" << kPalette[m] << "\"/>\n";
    }
    os << "<text x=\"" << x0 + 2 * kBar << "\" y=\"" << kTop + kPlotH + 18
       << "\" text-anchor=\"middle\">" << escape(rows[k].first) << "</text>\n";
  }
  for (int m = 0; m < 4; ++m) {
    const double lx = kLeft + group * rows.size() + 16, ly = kTop + 16.0 * (m + 1);
    os << "<rect x=\"" << lx << "\" y=\"" << ly - 10 << "\" width=\"12\" height=\"12\" fill=\""
       << kPalette[m] << "\"/>\n";
    os << "<text x=\"" << lx + 18 << "\" y=\"" << ly << "\">" << names[m] << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace stainforge::report
