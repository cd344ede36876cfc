#include "foresight/synth_world.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <ostream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "foresight/errors.hpp"
#include "foresight/rng.hpp"

namespace foresight {

namespace {

constexpr int kSceneFeatures = 16;
constexpr std::uint64_t kDecoderSeed = 0x5eed'dec0'de00'0001ULL;
constexpr std::uint64_t kViewMixSeed = 0x5eed'0f0f'0f0f'0002ULL;
constexpr std::uint64_t kBevMixSeed = 0x5eed'beef'0000'0003ULL;
constexpr std::uint32_t kEpisodeVersion = 1;

// rows x cols with orthonormal columns (rows >= cols) or orthonormal rows.
Matrix orthonormal(int rows, int cols, std::uint64_t seed) {
  const bool tall = rows >= cols;
  const int n = tall ? rows : cols;
  const int m = tall ? cols : rows;
  Rng rng(seed);
  Matrix basis(static_cast<std::size_t>(m), static_cast<std::size_t>(n));
  for (int c = 0; c < m; ++c) {
    auto v = basis.row(static_cast<std::size_t>(c));
    for (auto& x : v) {
      x = rng.normal();
    }
    // Two Gram-Schmidt passes keep the basis orthonormal to ~1e-15.
    for (int pass = 0; pass < 2; ++pass) {
      for (int p = 0; p < c; ++p) {
        const auto u = basis.row(static_cast<std::size_t>(p));
        double proj = 0.0;
        for (int i = 0; i < n; ++i) {
          proj += u[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
        }
        for (int i = 0; i < n; ++i) {
          v[static_cast<std::size_t>(i)] -= proj * u[static_cast<std::size_t>(i)];
        }
      }
    }
    double norm = 0.0;
    for (double x : v) {
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) {
      x /= norm;
    }
  }
  return tall ? basis.transposed() : basis;
}

void apply(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) {
      s += m(r, c) * x[c];
    }
    out[r] = s;
  }
}

int to_step(double seconds, int hz) { return static_cast<int>(std::lround(seconds * hz)); }

struct SceneState {
  std::array<double, 5> phases{};
};

}  // namespace

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Brake:
      return "BRAKE";
    case EventKind::Swerve:
      return "SWERVE";
    case EventKind::Cruise:
      return "CRUISE";
    case EventKind::Turn:
      return "TURN";
  }
  return "?";
}

EventKind event_kind_from_string(std::string_view name) {
  for (auto k : {EventKind::Brake, EventKind::Swerve, EventKind::Cruise, EventKind::Turn}) {
    if (to_string(k) == name) {
      return k;
    }
  }
  throw ConfigError("unknown event kind '" + std::string(name) + "'");
}

int WorldConfig::steps() const { return to_step(episode_len_s, control_hz); }

void WorldConfig::validate() const {
  if (n_views < 1) {
    throw ConfigError("world: n_views must be >= 1");
  }
  if (latent_dim < 1 || frame_dim < latent_dim) {
    throw ConfigError("world: need 1 <= latent_dim <= frame_dim");
  }
  if (control_hz < 1 || episode_len_s <= 0.0 || steps() < 3) {
    throw ConfigError("world: episode must span at least 3 control steps");
  }
  std::vector<EventSegment> spans;
  for (const auto& e : event_script) {
    const int b = to_step(e.start_s, control_hz);
    const int end = b + to_step(e.duration_s, control_hz);
    if (e.duration_s <= 0.0 || b < 1 || end > steps()) {
      throw ConfigError("world: event at " + std::to_string(e.start_s) + " s lies outside the episode");
    }
    spans.push_back({b, end, e.kind});
  }
  std::sort(spans.begin(), spans.end(), [](auto& a, auto& b) { return a.start_step < b.start_step; });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].start_step < spans[i - 1].end_step) {
      throw ConfigError("world: overlapping scripted events at step " + std::to_string(spans[i].start_step));
    }
  }
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : c.event_script) {
    events.push_back({{"start_s", e.start_s},
                      {"duration_s", e.duration_s},
                      {"kind", to_string(e.kind)},
                      {"magnitude", e.magnitude}});
  }
  j = nlohmann::json{{"n_views", c.n_views},         {"latent_dim", c.latent_dim},
                     {"frame_dim", c.frame_dim},     {"episode_len_s", c.episode_len_s},
                     {"control_hz", c.control_hz},   {"initial_speed", c.initial_speed},
                     {"cue_lead_s", c.cue_lead_s},   {"event_script", events}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "n_views") {
      c.n_views = value.get<int>();
    } else if (key == "latent_dim") {
      c.latent_dim = value.get<int>();
    } else if (key == "frame_dim") {
      c.frame_dim = value.get<int>();
    } else if (key == "episode_len_s") {
      c.episode_len_s = value.get<double>();
    } else if (key == "control_hz") {
      c.control_hz = value.get<int>();
    } else if (key == "initial_speed") {
      c.initial_speed = value.get<double>();
    } else if (key == "cue_lead_s") {
      c.cue_lead_s = value.get<double>();
    } else if (key == "event_script") {
      c.event_script.clear();
      for (const auto& e : value) {
        c.event_script.push_back({e.at("start_s").get<double>(), e.at("duration_s").get<double>(),
                                  event_kind_from_string(e.at("kind").get<std::string>()),
                                  e.at("magnitude").get<double>()});
      }
    } else {
      throw ConfigError("world: unknown key '" + key + "'");
    }
  }
}

FixedDecoder::FixedDecoder(int latent_dim, int frame_dim)
    : latent_dim_(latent_dim), frame_dim_(frame_dim), lift_(orthonormal(frame_dim, latent_dim, kDecoderSeed)) {
  if (latent_dim < 1 || frame_dim < latent_dim) {
    throw ConfigError("FixedDecoder: need 1 <= latent_dim <= frame_dim");
  }
}

std::vector<double> FixedDecoder::decode(std::span<const double> latent) const {
  if (latent.size() != static_cast<std::size_t>(latent_dim_)) {
    throw PreconditionError("decode_latent: latent has wrong dimension");
  }
  std::vector<double> frame(static_cast<std::size_t>(frame_dim_));
  apply(lift_, latent, frame);
  return frame;
}

std::vector<double> FixedDecoder::encode(std::span<const double> frame) const {
  if (frame.size() != static_cast<std::size_t>(frame_dim_)) {
    throw PreconditionError("encode_observation: frame has wrong dimension");
  }
  std::vector<double> latent(static_cast<std::size_t>(latent_dim_), 0.0);
  for (int r = 0; r < frame_dim_; ++r) {
    const double f = frame[static_cast<std::size_t>(r)];
    for (int c = 0; c < latent_dim_; ++c) {
      latent[static_cast<std::size_t>(c)] += lift_(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) * f;
    }
  }
  return latent;
}

namespace {

const FixedDecoder& shared_decoder(int latent_dim, int frame_dim) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, FixedDecoder> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({latent_dim, frame_dim});
  if (it == cache.end()) {
    it = cache.emplace(std::pair{latent_dim, frame_dim}, FixedDecoder(latent_dim, frame_dim)).first;
  }
  return it->second;
}

}  // namespace

std::vector<double> decode_latent(std::span<const double> latent, int frame_dim) {
  return shared_decoder(static_cast<int>(latent.size()), frame_dim).decode(latent);
}

std::vector<double> encode_observation(std::span<const double> frame, int latent_dim) {
  return shared_decoder(latent_dim, static_cast<int>(frame.size())).encode(frame);
}

std::vector<ScriptedEvent> random_event_script(std::uint64_t seed, double episode_len_s, int control_hz) {
  Rng rng(seed ^ 0xe7e7'0000'0000'0000ULL);
  std::vector<ScriptedEvent> script;
  const double step = 1.0 / control_hz;
  double t = 4.0 + 4.0 * rng.uniform();
  while (true) {
    const double u = rng.uniform();
    ScriptedEvent e;
    e.start_s = std::round(t / step) * step;
    if (u < 0.45) {
      e.kind = EventKind::Brake;
      e.duration_s = step * static_cast<double>(3 + rng.below(4));
      e.magnitude = 2.0 + 2.0 * rng.uniform();
    } else if (u < 0.85) {
      e.kind = EventKind::Swerve;
      e.duration_s = step * static_cast<double>(2 * (2 + rng.below(3)));
      e.magnitude = 1.5 + 1.5 * rng.uniform();
    } else {
      e.kind = EventKind::Turn;
      e.duration_s = step * static_cast<double>(8 + rng.below(8));
      e.magnitude = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.05 + 0.05 * rng.uniform());
    }
    double end = e.start_s + e.duration_s;
    if (end + 4.0 > episode_len_s) {
      break;
    }
    script.push_back(e);
    if (e.kind == EventKind::Brake) {
      // Recover the lost speed gently, after a pause.
      const double lost = e.magnitude * e.duration_s;
      ScriptedEvent recover;
      recover.kind = EventKind::Brake;
      recover.start_s = end + 2.0;
      recover.duration_s = 2.0;
      recover.magnitude = -lost / recover.duration_s;
      if (recover.start_s + recover.duration_s + 4.0 > episode_len_s) {
        break;
      }
      script.push_back(recover);
      end = recover.start_s + recover.duration_s;
    }
    t = end + 5.0 + 6.0 * rng.uniform();
  }
  return script;
}

Episode generate_episode(std::uint64_t seed, const WorldConfig& cfg) {
  cfg.validate();
  const int T = cfg.steps();
  const double dt = cfg.dt();
  Episode ep;
  ep.n_steps = T;
  ep.n_views = cfg.n_views;
  ep.latent_dim = cfg.latent_dim;
  ep.frame_dim = cfg.frame_dim;
  ep.control_hz = cfg.control_hz;

  // Per-step event lookup.
  std::vector<const ScriptedEvent*> active(static_cast<std::size_t>(T), nullptr);
  std::vector<int> active_start(static_cast<std::size_t>(T), 0);
  std::vector<int> active_len(static_cast<std::size_t>(T), 0);
  std::vector<double> cue(static_cast<std::size_t>(T), 0.0);
  for (const auto& e : cfg.event_script) {
    const int b = to_step(e.start_s, cfg.control_hz);
    const int n = to_step(e.duration_s, cfg.control_hz);
    ep.events.push_back({b, b + n, e.kind});
    for (int k = b; k < b + n; ++k) {
      active[static_cast<std::size_t>(k)] = &e;
      active_start[static_cast<std::size_t>(k)] = b;
      active_len[static_cast<std::size_t>(k)] = n;
    }
    if ((e.kind == EventKind::Brake && e.magnitude > 0.0) || e.kind == EventKind::Swerve) {
      const int lead = to_step(cfg.cue_lead_s, cfg.control_hz);
      for (int k = std::max(0, b - lead); k < b + n; ++k) {
        cue[static_cast<std::size_t>(k)] = e.kind == EventKind::Brake ? 1.0 : -1.0;
      }
    }
  }
  std::sort(ep.events.begin(), ep.events.end(), [](auto& a, auto& b) { return a.start_step < b.start_step; });

  ep.x.assign(static_cast<std::size_t>(T), 0.0);
  ep.y.assign(static_cast<std::size_t>(T), 0.0);
  ep.a_x.assign(static_cast<std::size_t>(T), 0.0);
  ep.a_y.assign(static_cast<std::size_t>(T), 0.0);
  std::vector<double> vx(static_cast<std::size_t>(T)), vy(static_cast<std::size_t>(T));
  double cvx = cfg.initial_speed;
  double cvy = 0.0;
  for (int k = 0; k < T; ++k) {
    double ax = 0.0;
    double ay = 0.0;
    if (const ScriptedEvent* e = active[static_cast<std::size_t>(k)]; e != nullptr && k >= 1) {
      const double speed = std::hypot(cvx, cvy);
      const double ux = speed > 0 ? cvx / speed : 1.0;
      const double uy = speed > 0 ? cvy / speed : 0.0;
      switch (e->kind) {
        case EventKind::Brake:
          ax = -e->magnitude * ux;
          ay = -e->magnitude * uy;
          break;
        case EventKind::Swerve: {
          const int into = k - active_start[static_cast<std::size_t>(k)];
          const double sign = 2 * into < active_len[static_cast<std::size_t>(k)] ? 1.0 : -1.0;
          ax = -sign * e->magnitude * uy;
          ay = sign * e->magnitude * ux;
          break;
        }
        case EventKind::Turn: {
          const double c = std::cos(e->magnitude * dt);
          const double s = std::sin(e->magnitude * dt);
          ax = ((c * cvx - s * cvy) - cvx) / dt;
          ay = ((s * cvx + c * cvy) - cvy) / dt;
          break;
        }
        case EventKind::Cruise:
          break;
      }
      if (e->kind == EventKind::Brake && (cvx + ax * dt) * ux + (cvy + ay * dt) * uy < 0.0) {
        throw ConfigError("world: BRAKE at step " + std::to_string(k) + " would reverse the vehicle");
      }
    }
    cvx += ax * dt;
    cvy += ay * dt;
    ep.a_x[static_cast<std::size_t>(k)] = ax;
    ep.a_y[static_cast<std::size_t>(k)] = ay;
    vx[static_cast<std::size_t>(k)] = cvx;
    vy[static_cast<std::size_t>(k)] = cvy;
    if (k + 1 < T) {
      ep.x[static_cast<std::size_t>(k) + 1] = ep.x[static_cast<std::size_t>(k)] + cvx * dt;
      ep.y[static_cast<std::size_t>(k) + 1] = ep.y[static_cast<std::size_t>(k)] + cvy * dt;
    }
  }

  Rng scene_rng(seed);
  SceneState scene;
  for (auto& p : scene.phases) {
    p = 2.0 * std::numbers::pi * scene_rng.uniform();
  }

  std::vector<Matrix> view_mix;
  for (int v = 0; v < cfg.n_views; ++v) {
    view_mix.push_back(orthonormal(cfg.latent_dim, kSceneFeatures, kViewMixSeed + static_cast<std::uint64_t>(v)));
  }
  const Matrix bev_mix = orthonormal(cfg.latent_dim, kSceneFeatures, kBevMixSeed);
  const FixedDecoder& decoder = shared_decoder(cfg.latent_dim, cfg.frame_dim);

  ep.obs_latents = Matrix(static_cast<std::size_t>(T * cfg.n_views), static_cast<std::size_t>(cfg.latent_dim));
  ep.frames = Matrix(static_cast<std::size_t>(T * cfg.n_views), static_cast<std::size_t>(cfg.frame_dim));
  ep.bev_latents = Matrix(static_cast<std::size_t>(T), static_cast<std::size_t>(cfg.latent_dim));
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::array<double, kSceneFeatures> phi{};
  for (int k = 0; k < T; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const double speed = std::hypot(vx[ku], vy[ku]);
    const double heading = std::atan2(vy[ku], vx[ku]);
    const double x = ep.x[ku];
    const double t = ep.time_of(k);
    phi = {(speed - cfg.initial_speed) / 5.0,
           std::sin(heading),
           std::cos(heading) - 1.0,
           ep.y[ku] / 4.0,
           std::sin(two_pi * x / 120.0 + scene.phases[0]),
           std::cos(two_pi * x / 120.0 + scene.phases[0]),
           std::sin(two_pi * x / 250.0 + scene.phases[1]),
           std::cos(two_pi * x / 250.0 + scene.phases[1]),
           std::sin(two_pi * x / 500.0 + scene.phases[2]),
           std::cos(two_pi * x / 500.0 + scene.phases[2]),
           ep.a_x[ku] / 3.0,
           ep.a_y[ku] / 3.0,
           std::sin(two_pi * t / 30.0 + scene.phases[3]),
           std::cos(two_pi * t / 30.0 + scene.phases[3]),
           vy[ku] / 2.0,
           cue[ku]};
    for (int v = 0; v < cfg.n_views; ++v) {
      const auto row = static_cast<std::size_t>(k * cfg.n_views + v);
      apply(view_mix[static_cast<std::size_t>(v)], phi, ep.obs_latents.row(row));
      const auto frame = decoder.decode(ep.obs_latents.row(row));
      std::copy(frame.begin(), frame.end(), ep.frames.row(row).begin());
    }
    apply(bev_mix, phi, ep.bev_latents.row(ku));
  }
  return ep;
}

std::vector<EventSegment> event_segments(const Episode& episode) { return episode.events; }

void write_episode(std::ostream& out, const Episode& ep) {
  binio::put_magic(out, "FSEP");
  binio::put_u32(out, kEpisodeVersion);
  for (int v : {ep.n_steps, ep.n_views, ep.latent_dim, ep.frame_dim, ep.control_hz}) {
    binio::put_u32(out, static_cast<std::uint32_t>(v));
  }
  binio::put_f64s(out, ep.x);
  binio::put_f64s(out, ep.y);
  binio::put_f64s(out, ep.a_x);
  binio::put_f64s(out, ep.a_y);
  binio::put_f64s(out, ep.obs_latents.values());
  binio::put_f64s(out, ep.frames.values());
  binio::put_f64s(out, ep.bev_latents.values());
  binio::put_u32(out, static_cast<std::uint32_t>(ep.events.size()));
  for (const auto& e : ep.events) {
    binio::put_u32(out, static_cast<std::uint32_t>(e.start_step));
    binio::put_u32(out, static_cast<std::uint32_t>(e.end_step));
    binio::put_u32(out, static_cast<std::uint32_t>(e.kind));
  }
}

Episode read_episode(std::istream& in) {
  binio::expect_magic(in, "FSEP", "read_episode");
  if (const auto version = binio::get_u32(in); version != kEpisodeVersion) {
    throw RuntimeFailure("read_episode: unsupported version " + std::to_string(version));
  }
  Episode ep;
  ep.n_steps = static_cast<int>(binio::get_u32(in));
  ep.n_views = static_cast<int>(binio::get_u32(in));
  ep.latent_dim = static_cast<int>(binio::get_u32(in));
  ep.frame_dim = static_cast<int>(binio::get_u32(in));
  ep.control_hz = static_cast<int>(binio::get_u32(in));
  const auto T = static_cast<std::size_t>(ep.n_steps);
  const auto V = static_cast<std::size_t>(ep.n_views);
  for (auto* series : {&ep.x, &ep.y, &ep.a_x, &ep.a_y}) {
    series->resize(T);
    binio::get_f64s(in, *series);
  }
  ep.obs_latents = Matrix(T * V, static_cast<std::size_t>(ep.latent_dim));
  ep.frames = Matrix(T * V, static_cast<std::size_t>(ep.frame_dim));
  ep.bev_latents = Matrix(T, static_cast<std::size_t>(ep.latent_dim));
  binio::get_f64s(in, ep.obs_latents.values());
  binio::get_f64s(in, ep.frames.values());
  binio::get_f64s(in, ep.bev_latents.values());
  const auto n_events = binio::get_u32(in);
  for (std::uint32_t i = 0; i < n_events; ++i) {
    EventSegment e;
    e.start_step = static_cast<int>(binio::get_u32(in));
    e.end_step = static_cast<int>(binio::get_u32(in));
    e.kind = static_cast<EventKind>(binio::get_u32(in));
    ep.events.push_back(e);
  }
  return ep;
}

void write_episode_csv(std::ostream& out, const Episode& ep) {
  out << "step,t,x,y,a_x,a_y,event\n";
  std::size_t next = 0;
  for (int k = 0; k < ep.n_steps; ++k) {
    while (next < ep.events.size() && ep.events[next].end_step <= k) {
      ++next;
    }
    const bool in_event = next < ep.events.size() && ep.events[next].start_step <= k;
    const auto ku = static_cast<std::size_t>(k);
    out << k << ',' << ep.time_of(k) << ',' << ep.x[ku] << ',' << ep.y[ku] << ',' << ep.a_x[ku] << ','
        << ep.a_y[ku] << ',' << (in_event ? to_string(ep.events[next].kind) : "") << '\n';
  }
}

}  // namespace foresight
