// SPDX-License-Identifier: Apache-2.0
#include "kanpaint/metrics.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "kanpaint/errors.hpp"

namespace kanpaint::metrics {

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

struct Plane {
  std::size_t h, w;
};

Plane plane_of(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
  if (a.rank() < 2) throw DimensionError(std::string(op) + ": need at least two axes");
  const Plane p{a.dim(a.rank() - 2), a.dim(a.rank() - 1)};
  if (p.h * p.w != a.numel()) {
    throw DimensionError(std::string(op) + ": expected a single image, got " + shape_str(a.shape()));
  }
  return p;
}

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double total = 0.0;
  const double center = (kWindow - 1) / 2.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - center;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Valid separable filtering of an h x w plane with the window.
std::vector<double> filter_valid(const std::vector<double>& x, std::size_t h, std::size_t w,
                                 const std::array<double, kWindow>& g) {
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> rows(h * ow), out(oh * ow);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * x[i * w + j + k];
      rows[i * ow + j] = acc;
    }
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * rows[(i + k) * ow + j];
      out[i * ow + j] = acc;
    }
  return out;
}

template <typename F>
double masked_mean(const Tensor& a, const Tensor& b, const Tensor& mask, const char* op, F f) {
  plane_of(a, b, op);
  if (mask.numel() != a.numel()) {
    throw DimensionError(std::string(op) + ": mask " + shape_str(mask.shape()) + " vs image " +
                         shape_str(a.shape()));
  }
  auto av = a.values(), bv = b.values(), mv = mask.values();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (mv[i] == 0.0) continue;
    total += f(av[i] - bv[i]);
    ++count;
  }
  if (count == 0) throw ContractError(std::string(op) + ": mask selects no pixels");
  return total / static_cast<double>(count);
}

double psnr_from_mse(double m, double peak) {
  if (!(peak > 0.0)) throw ContractError("psnr: peak must be positive");
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / m);
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
  plane_of(a, b, "mse");
  auto av = a.values(), bv = b.values();
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  return total / static_cast<double>(av.size());
}

double mae(const Tensor& a, const Tensor& b) {
  plane_of(a, b, "mae");
  auto av = a.values(), bv = b.values();
  double total = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) total += std::abs(av[i] - bv[i]);
  return total / static_cast<double>(av.size());
}

double psnr(const Tensor& a, const Tensor& b, double peak) { return psnr_from_mse(mse(a, b), peak); }

double ssim(const Tensor& a, const Tensor& b) {
  const Plane p = plane_of(a, b, "ssim");
  if (p.h < kWindow || p.w < kWindow) {
    throw ContractError("ssim: image " + std::to_string(p.h) + "x" + std::to_string(p.w) +
                        " is smaller than the 11x11 window");
  }
  const auto g = gaussian_window();
  std::vector<double> x(a.values().begin(), a.values().end()), y(b.values().begin(), b.values().end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, p.h, p.w, g), my = filter_valid(y, p.h, p.w, g);
  const auto sxx = filter_valid(xx, p.h, p.w, g), syy = filter_valid(yy, p.h, p.w, g),
             sxy = filter_valid(xy, p.h, p.w, g);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i],
                 cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + kC1) * (2 * cov + kC2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
  }
  return total / static_cast<double>(mx.size());
}

double masked_mse(const Tensor& a, const Tensor& b, const Tensor& mask) {
  return masked_mean(a, b, mask, "masked_mse", [](double d) { return d * d; });
}

double masked_mae(const Tensor& a, const Tensor& b, const Tensor& mask) {
  return masked_mean(a, b, mask, "masked_mae", [](double d) { return std::abs(d); });
}

double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& mask, double peak) {
  return psnr_from_mse(masked_mse(a, b, mask), peak);
}

ImageScores score(const std::string& image_id, const Tensor& prediction, const Tensor& reference,
                  const Tensor* mask) {
  ImageScores s;
  s.image_id = image_id;
  s.ssim = ssim(prediction, reference);
  if (mask) {
    s.mse = masked_mse(prediction, reference, *mask);
    s.mae = masked_mae(prediction, reference, *mask);
  } else {
    s.mse = mse(prediction, reference);
    s.mae = mae(prediction, reference);
  }
  s.psnr = psnr_from_mse(s.mse, 1.0);
  return s;
}

std::vector<ReferenceRow> published_reference_rows() {
  return {
      {"AutoEncoder", 12.6916, 0.6520, 0.0934},
      {"Pix2Pix GAN", 17.6706, 0.7634, 0.0288},
      {"DDPM", 17.3027, 0.7416, 0.0223},
      {"U-KAN diffusion", 20.0588, 0.8037, 0.0121},
  };
}

ImageScores EvalReport::mean() const {
  ImageScores m;
  m.image_id = "mean";
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.mse += r.mse;
    m.mae += r.mae;
  }
  const double n = static_cast<double>(rows.size());
  m.psnr /= n;
  m.ssim /= n;
  m.mse /= n;
  m.mae /= n;
  return m;
}

std::string format_value(double value, int precision) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (std::isnan(value)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, value);
  return buf;
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "method,image_id,psnr,ssim,mse,mae\n";
  for (const auto& r : report.rows) {
    os << report.method << ',' << r.image_id << ',' << format_value(r.psnr, 6) << ','
       << format_value(r.ssim, 6) << ',' << format_value(r.mse, 8) << ','
       << format_value(r.mae, 8) << '\n';
  }
  return os.str();
}

std::string summary_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-40s %10s %8s %10s %10s\n", "Method", "PSNR", "SSIM", "MSE", "MAE");
  os << line;
  for (const auto& rep : reports) {
    const ImageScores m = rep.mean();
    std::snprintf(line, sizeof line, "%-40s %10s %8s %10s %10s\n", rep.method.c_str(),
                  format_value(m.psnr).c_str(), format_value(m.ssim).c_str(),
                  format_value(m.mse).c_str(), format_value(m.mae).c_str());
    os << line;
  }
  for (const auto& rep : reports) {
    for (const auto& ref : rep.references) {
      const std::string label = ref.method + " - reference (not reproduced)";
      std::snprintf(line, sizeof line, "%-40s %10s %8s %10s %10s\n", label.c_str(),
                    format_value(ref.psnr).c_str(), format_value(ref.ssim).c_str(),
                    format_value(ref.mse).c_str(), "-");
      os << line;
    }
  }
  return os.str();
}

}  // namespace kanpaint::metrics
