#pragma once

// Dataset ingestion, chronological splitting, window sampling, train-side
// standardization for metric reporting, and imputation mask generation.

#include <cstdint>
#include <string>
#include <vector>

#include "hgts/errors.hpp"
#include "hgts/tensor.hpp"

namespace hgts::data {

struct SeriesTable {
  std::vector<double> timestamps;          // strictly increasing
  std::vector<std::string> channel_names;  // size C
  std::vector<double> values;              // C x length, row-major per channel

  int64_t channels() const { return static_cast<int64_t>(channel_names.size()); }
  int64_t length() const { return static_cast<int64_t>(timestamps.size()); }
  double at(int64_t c, int64_t t) const { return values[static_cast<size_t>(c * length() + t)]; }
};

struct Range {
  int64_t begin = 0;
  int64_t end = 0;
  int64_t size() const { return end - begin; }
};

enum class SplitPreset { ratio, ett_hourly, ett_minute };

struct SplitSpec {
  Range train, val, test;
  std::vector<double> mean;   // per channel, train range only
  std::vector<double> stdev;  // per channel, floored away from zero
};

// One batch of raw windows; imputation batches carry the masks.
struct WindowBatch {
  int64_t batch = 0;
  int64_t channels = 0;
  int64_t width = 0;
  std::vector<double> values;     // B x C x W
  std::vector<int64_t> starts;    // window start index per batch element
  std::vector<uint8_t> observed;  // B x C x W; empty unless imputation
  std::vector<uint8_t> loss_mask; // B x C x W; empty unless imputation

  template <typename T>
  Tensor<T> tensor() const {
    std::vector<T> v(values.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(values[i]);
    return Tensor<T>::from({batch, channels, width}, std::move(v));
  }
};

// CSV: UTF-8, header row, first column ISO-8601 or epoch timestamp, remaining
// columns decimal numerics. Unparsable cells and NaNs are rejected with their
// (row, column) position; timestamps must be strictly increasing.
SeriesTable load_csv(const std::string& path);

// Contiguous chronological split plus per-channel train statistics.
// Presets: ett_hourly = 12/4/4 months of hourly data, ett_minute = the same
// calendar at 15-minute sampling, ratio = fractional split.
SplitSpec chrono_split(const SeriesTable& table, SplitPreset preset, double r_train = 0.6,
                       double r_val = 0.2);

// Start indices of sliding windows of length `width` inside `range`.
std::vector<int64_t> window_starts(const Range& range, int64_t width, int64_t stride);

// Evaluation windows for rolling forecast: context `lookback` followed by
// `horizon` points, stride = horizon, everything inside `range`.
std::vector<int64_t> eval_window_starts(const Range& range, int64_t lookback, int64_t horizon);

// Deterministic shuffle of window starts.
void shuffle_starts(std::vector<int64_t>& starts, uint64_t seed);

// Materialize a batch of raw windows.
WindowBatch gather_windows(const SeriesTable& table, const std::vector<int64_t>& starts,
                           int64_t width);

// Per-(b,c)-row mask with exactly floor(ratio * width) masked points, drawn
// uniformly without replacement. loss_mask marks the masked (scored) points;
// observed marks the rest. `shared_across_channels` reuses one draw per
// batch element for every channel.
void make_imputation_mask(WindowBatch& batch, double ratio, uint64_t seed,
                          bool shared_across_channels = false);

// z-score a value with the split's train statistics.
inline double standardize(const SplitSpec& split, int64_t channel, double v) {
  return (v - split.mean[static_cast<size_t>(channel)]) / split.stdev[static_cast<size_t>(channel)];
}

void write_csv(const SeriesTable& table, const std::string& path);

// Deterministic multivariate surrogate with the ETT file schema (7 channels,
// hourly sampling): daily/weekly harmonics, a shared autoregressive factor,
// per-channel trends and autoregressive noise.
SeriesTable make_synthetic_ett(int64_t rows = 17420, uint64_t seed = 7);

}  // namespace hgts::data
