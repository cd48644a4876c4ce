#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace sfb {

struct MeanEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

// Sample mean and the standard error of the mean (sample sd / sqrt(n)).
MeanEstimate mean_estimate(std::span<const double> v);

// Mean with a batch-means standard error for correlated samples.
MeanEstimate batch_means(std::span<const double> v, std::size_t n_batches);

double median(std::vector<double> v);

// Sample median with a distribution-free standard error read off the
// order statistics bracketing the 95% interval for the median:
// (x_(hi) - x_(lo)) / (2 * 1.96), ranks n/2 -+ 1.96 sqrt(n) / 2.
MeanEstimate median_estimate(std::vector<double> v);

// Least squares y = a + b x with the slope's standard error and a two-sided
// 95% Student-t interval.
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

LinearFit linear_fit(std::span<const double> x, std::span<const double> y);

// 0.975 quantile of Student's t with nu degrees of freedom.
double t_quantile_975(double nu);

}  // namespace sfb
