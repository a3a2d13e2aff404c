// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "kanpaint/tensor.hpp"

namespace kanpaint::metrics {

// All image metrics take single images: the last two axes are H and W and
// any leading axes must have size 1.

double mse(const Tensor& a, const Tensor& b);
double mae(const Tensor& a, const Tensor& b);
/// 10 log10(peak^2 / mse); +infinity for identical images.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);
/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), dynamic range 1.
double ssim(const Tensor& a, const Tensor& b);

// Restricted to pixels where mask != 0. Throws ContractError for an empty mask.
double masked_mse(const Tensor& a, const Tensor& b, const Tensor& mask);
double masked_mae(const Tensor& a, const Tensor& b, const Tensor& mask);
double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& mask, double peak = 1.0);

struct ImageScores {
  std::string image_id;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
  double mae = 0.0;
};

/// Scores a prediction against its reference. With a mask, PSNR, MSE and
/// MAE cover the masked pixels only; SSIM always covers the whole image.
ImageScores score(const std::string& image_id, const Tensor& prediction, const Tensor& reference,
                  const Tensor* mask = nullptr);

/// A published result shown next to measured ones; never compared against.
struct ReferenceRow {
  std::string method;
  double psnr, ssim, mse;
};

/// Rows of the published comparison table, labelled as not reproduced.
std::vector<ReferenceRow> published_reference_rows();

struct EvalReport {
  std::string method;
  std::vector<ImageScores> rows;
  std::vector<ReferenceRow> references;

  /// Arithmetic mean of every column (image_id "mean").
  ImageScores mean() const;
};

/// Columns: method,image_id,psnr,ssim,mse,mae; infinite PSNR is written "inf".
std::string to_csv(const EvalReport& report);
/// Method | PSNR | SSIM | MSE | MAE table of aggregate rows and references.
std::string summary_table(const std::vector<EvalReport>& reports);

/// Formats a metric value; infinities print as "inf".
std::string format_value(double value, int precision = 4);

}  // namespace kanpaint::metrics
