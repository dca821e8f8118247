#include "hgts/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace hgts::data {

namespace {

// Accepts "YYYY-MM-DD HH:MM:SS", the T-separated variant, "YYYY-MM-DD",
// or a plain number (epoch / ordinal).
bool parse_timestamp(const std::string& cell, double& out) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  int n = std::sscanf(cell.c_str(), "%d-%d-%d%*1[ T]%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
  if (n >= 3) {
    // days-from-civil; no timezone involved
    int64_t yy = y - (mo <= 2);
    int64_t era = (yy >= 0 ? yy : yy - 399) / 400;
    int64_t yoe = yy - era * 400;
    int64_t doy = (153 * (mo + (mo > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    int64_t days = era * 146097 + doe - 719468;
    out = static_cast<double>(days * 86400 + h * 3600 + mi * 60 + s);
    return true;
  }
  char* endp = nullptr;
  double v = std::strtod(cell.c_str(), &endp);
  if (endp && *endp == '\0' && endp != cell.c_str() && std::isfinite(v)) {
    out = v;
    return true;
  }
  return false;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

}  // namespace

SeriesTable load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": empty file");
  auto header = split_line(line);
  if (header.size() < 2) throw DataError(path + ": need a timestamp column and at least one channel");

  SeriesTable table;
  table.channel_names.assign(header.begin() + 1, header.end());
  int64_t C = table.channels();
  std::vector<std::vector<double>> cols(static_cast<size_t>(C));

  int64_t row = 1;  // header was row 0
  while (std::getline(f, line)) {
    if (line.empty()) {
      ++row;
      continue;
    }
    auto cells = split_line(line);
    if (static_cast<int64_t>(cells.size()) != C + 1)
      throw DataError(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(C + 1));
    double ts = 0;
    if (!parse_timestamp(cells[0], ts))
      throw DataError(path + ": row " + std::to_string(row) + ", column 0: unparsable timestamp '" +
                      cells[0] + "'");
    if (!table.timestamps.empty() && ts <= table.timestamps.back())
      throw DataError(path + ": row " + std::to_string(row) + ": timestamps not strictly increasing");
    for (int64_t c = 0; c < C; ++c) {
      char* endp = nullptr;
      const std::string& cell = cells[static_cast<size_t>(c + 1)];
      double v = std::strtod(cell.c_str(), &endp);
      if (!endp || *endp != '\0' || endp == cell.c_str())
        throw DataError(path + ": row " + std::to_string(row) + ", column " + std::to_string(c + 1) +
                        ": unparsable value '" + cell + "'");
      if (!std::isfinite(v))
        throw DataError(path + ": row " + std::to_string(row) + ", column " + std::to_string(c + 1) +
                        ": missing or non-finite value");
      cols[static_cast<size_t>(c)].push_back(v);
    }
    table.timestamps.push_back(ts);
    ++row;
  }
  if (table.timestamps.empty()) throw DataError(path + ": no data rows");

  int64_t len = table.length();
  table.values.resize(static_cast<size_t>(C * len));
  for (int64_t c = 0; c < C; ++c)
    std::copy(cols[static_cast<size_t>(c)].begin(), cols[static_cast<size_t>(c)].end(),
              table.values.begin() + c * len);
  return table;
}

SplitSpec chrono_split(const SeriesTable& table, SplitPreset preset, double r_train, double r_val) {
  int64_t n = table.length();
  SplitSpec sp;
  switch (preset) {
    case SplitPreset::ett_hourly: {
      // 12 / 4 / 4 months of hourly data (30-day months)
      int64_t m = 720;
      if (n < 20 * m) throw DataError("table too short for the hourly calendar split: " + std::to_string(n));
      sp.train = {0, 12 * m};
      sp.val = {12 * m, 16 * m};
      sp.test = {16 * m, 20 * m};
      break;
    }
    case SplitPreset::ett_minute: {
      int64_t m = 720 * 4;  // 15-minute sampling
      if (n < 20 * m) throw DataError("table too short for the minute calendar split: " + std::to_string(n));
      sp.train = {0, 12 * m};
      sp.val = {12 * m, 16 * m};
      sp.test = {16 * m, 20 * m};
      break;
    }
    case SplitPreset::ratio: {
      if (!(r_train > 0) || !(r_val >= 0) || r_train + r_val >= 1.0)
        throw ConfigError("split ratios must satisfy 0 < train, 0 <= val, train+val < 1");
      int64_t t = static_cast<int64_t>(std::floor(static_cast<double>(n) * r_train));
      int64_t v = static_cast<int64_t>(std::floor(static_cast<double>(n) * (r_train + r_val)));
      sp.train = {0, t};
      sp.val = {t, v};
      sp.test = {v, n};
      break;
    }
  }
  if (sp.train.size() < 2 || sp.val.size() < 1 || sp.test.size() < 1)
    throw DataError("split leaves an empty range");

  int64_t C = table.channels();
  sp.mean.resize(static_cast<size_t>(C));
  sp.stdev.resize(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    double s = 0;
    for (int64_t t = sp.train.begin; t < sp.train.end; ++t) s += table.at(c, t);
    double mu = s / static_cast<double>(sp.train.size());
    double var = 0;
    for (int64_t t = sp.train.begin; t < sp.train.end; ++t) {
      double d = table.at(c, t) - mu;
      var += d * d;
    }
    var /= static_cast<double>(sp.train.size());
    sp.mean[static_cast<size_t>(c)] = mu;
    sp.stdev[static_cast<size_t>(c)] = std::max(std::sqrt(var), 1e-8);
  }
  return sp;
}

std::vector<int64_t> window_starts(const Range& range, int64_t width, int64_t stride) {
  if (width <= 0 || stride <= 0) throw ArgumentError("window width and stride must be positive");
  std::vector<int64_t> out;
  for (int64_t s = range.begin; s + width <= range.end; s += stride) out.push_back(s);
  return out;
}

std::vector<int64_t> eval_window_starts(const Range& range, int64_t lookback, int64_t horizon) {
  if (lookback <= 0 || horizon <= 0) throw ArgumentError("lookback and horizon must be positive");
  std::vector<int64_t> out;
  for (int64_t s = range.begin; s + lookback + horizon <= range.end; s += horizon) out.push_back(s);
  return out;
}

void shuffle_starts(std::vector<int64_t>& starts, uint64_t seed) {
  Rng rng(seed);
  rng.shuffle(starts);
}

WindowBatch gather_windows(const SeriesTable& table, const std::vector<int64_t>& starts, int64_t width) {
  WindowBatch b;
  b.batch = static_cast<int64_t>(starts.size());
  b.channels = table.channels();
  b.width = width;
  b.starts = starts;
  b.values.resize(static_cast<size_t>(b.batch * b.channels * width));
  int64_t len = table.length();
  for (int64_t i = 0; i < b.batch; ++i) {
    int64_t s = starts[static_cast<size_t>(i)];
    if (s < 0 || s + width > len)
      throw DataError("window [" + std::to_string(s) + "," + std::to_string(s + width) +
                      ") outside table of length " + std::to_string(len));
    for (int64_t c = 0; c < b.channels; ++c)
      std::copy(table.values.begin() + c * len + s, table.values.begin() + c * len + s + width,
                b.values.begin() + (i * b.channels + c) * width);
  }
  return b;
}

void make_imputation_mask(WindowBatch& batch, double ratio, uint64_t seed, bool shared_across_channels) {
  if (!(ratio > 0.0) || !(ratio < 1.0)) throw ArgumentError("mask ratio must lie in (0,1)");
  int64_t W = batch.width;
  int64_t nmask = static_cast<int64_t>(std::floor(ratio * static_cast<double>(W)));
  if (nmask < 1) throw ArgumentError("mask ratio too small: no point would be masked");
  if (W - nmask < 2) throw ArgumentError("mask ratio leaves fewer than 2 observed points per row");
  batch.observed.assign(static_cast<size_t>(batch.batch * batch.channels * W), 1);
  batch.loss_mask.assign(static_cast<size_t>(batch.batch * batch.channels * W), 0);
  Rng rng(seed);
  std::vector<int64_t> idx(static_cast<size_t>(W));
  auto draw_row = [&](int64_t row) {
    std::iota(idx.begin(), idx.end(), 0);
    // partial Fisher-Yates: the first nmask entries become the masked points
    for (int64_t j = 0; j < nmask; ++j) {
      int64_t pick = j + static_cast<int64_t>(rng.integer(static_cast<uint64_t>(W - j)));
      std::swap(idx[static_cast<size_t>(j)], idx[static_cast<size_t>(pick)]);
    }
    for (int64_t j = 0; j < nmask; ++j) {
      batch.observed[static_cast<size_t>(row * W + idx[static_cast<size_t>(j)])] = 0;
      batch.loss_mask[static_cast<size_t>(row * W + idx[static_cast<size_t>(j)])] = 1;
    }
  };
  if (shared_across_channels) {
    for (int64_t i = 0; i < batch.batch; ++i) {
      draw_row(i * batch.channels);
      for (int64_t c = 1; c < batch.channels; ++c) {
        int64_t src = (i * batch.channels) * W;
        int64_t dst = (i * batch.channels + c) * W;
        std::copy(batch.observed.begin() + src, batch.observed.begin() + src + W,
                  batch.observed.begin() + dst);
        std::copy(batch.loss_mask.begin() + src, batch.loss_mask.begin() + src + W,
                  batch.loss_mask.begin() + dst);
      }
    }
  } else {
    for (int64_t r = 0; r < batch.batch * batch.channels; ++r) draw_row(r);
  }
}

void write_csv(const SeriesTable& table, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "date";
  for (auto& n : table.channel_names) f << "," << n;
  f << "\n";
  int64_t len = table.length();
  char buf[64];
  for (int64_t t = 0; t < len; ++t) {
    int64_t sec = static_cast<int64_t>(table.timestamps[static_cast<size_t>(t)]);
    int64_t days = sec / 86400, rem = sec % 86400;
    // civil-from-days
    int64_t z = days + 719468;
    int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    int64_t doe = z - era * 146097;
    int64_t yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    int64_t y = yoe + era * 400;
    int64_t doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    int64_t mp = (5 * doy + 2) / 153;
    int64_t d = doy - (153 * mp + 2) / 5 + 1;
    int64_t mo = mp + (mp < 10 ? 3 : -9);
    y += (mo <= 2);
    std::snprintf(buf, sizeof(buf), "%04lld-%02lld-%02lld %02lld:%02lld:%02lld",
                  static_cast<long long>(y), static_cast<long long>(mo), static_cast<long long>(d),
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem % 3600) / 60),
                  static_cast<long long>(rem % 60));
    f << buf;
    for (int64_t c = 0; c < table.channels(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.6f", table.at(c, t));
      f << "," << buf;
    }
    f << "\n";
  }
}

}  // namespace hgts::data
