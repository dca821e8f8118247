#include <cmath>

#include "hgts/data.hpp"

namespace hgts::data {

// Hourly 7-channel surrogate with the ETT column layout. Each channel mixes
// daily and weekly harmonics, a shared slow autoregressive factor (so the
// cross-channel stage has real structure to find), a mild trend and
// channel-local AR(1) noise. Fully deterministic for a given seed.
SeriesTable make_synthetic_ett(int64_t rows, uint64_t seed) {
  static const char* kNames[7] = {"HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"};
  const int64_t C = 7;
  Rng rng(seed);

  struct ChannelParams {
    double level, scale, amp_d, ph_d, amp_d2, ph_d2, amp_w, ph_w, load, trend, rho, sigma;
  };
  std::vector<ChannelParams> ps(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    auto& p = ps[static_cast<size_t>(c)];
    p.level = 4.0 * rng.normal();
    p.scale = 1.0 + 5.0 * rng.uniform();
    p.amp_d = 1.0 + 0.5 * rng.uniform();
    p.ph_d = 2.0 * M_PI * rng.uniform();
    p.amp_d2 = 0.3 + 0.2 * rng.uniform();
    p.ph_d2 = 2.0 * M_PI * rng.uniform();
    p.amp_w = 0.4 + 0.25 * rng.uniform();
    p.ph_w = 2.0 * M_PI * rng.uniform();
    p.load = 0.45 + 0.4 * rng.uniform();
    p.trend = -0.5 + rng.uniform();
    p.rho = 0.75 + 0.1 * rng.uniform();
    p.sigma = 0.30 + 0.10 * rng.uniform();
  }
  ps[6].amp_d *= 1.4;  // the target-like channel swings harder
  ps[6].sigma *= 1.2;

  SeriesTable table;
  table.channel_names.assign(kNames, kNames + C);
  table.timestamps.resize(static_cast<size_t>(rows));
  table.values.resize(static_cast<size_t>(C * rows));

  // 2016-07-01 00:00:00 as days-from-civil
  int64_t yy = 2016, mo = 7, dd = 1;
  int64_t y2 = yy - (mo <= 2);
  int64_t era = y2 / 400;
  int64_t yoe = y2 - era * 400;
  int64_t doy = (153 * (mo - 3) + 2) / 5 + dd - 1;
  int64_t base = (era * 146097 + yoe * 365 + yoe / 4 - yoe / 100 + doy - 719468) * 86400;

  double z = 0.0;
  std::vector<double> noise(static_cast<size_t>(C), 0.0);
  for (int64_t t = 0; t < rows; ++t) {
    table.timestamps[static_cast<size_t>(t)] = static_cast<double>(base + t * 3600);
    z = 0.995 * z + 0.10 * rng.normal();
    double day = 2.0 * M_PI * static_cast<double>(t) / 24.0;
    double week = 2.0 * M_PI * static_cast<double>(t) / 168.0;
    double prog = static_cast<double>(t) / static_cast<double>(rows);
    for (int64_t c = 0; c < C; ++c) {
      auto& p = ps[static_cast<size_t>(c)];
      noise[static_cast<size_t>(c)] = p.rho * noise[static_cast<size_t>(c)] + p.sigma * rng.normal();
      double v = p.amp_d * std::sin(day + p.ph_d) + p.amp_d2 * std::sin(2.0 * day + p.ph_d2) +
                 p.amp_w * std::sin(week + p.ph_w) + p.load * z + p.trend * prog +
                 noise[static_cast<size_t>(c)];
      table.values[static_cast<size_t>(c * rows + t)] = p.level + p.scale * v;
    }
  }
  return table;
}

}  // namespace hgts::data
