#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "foresight/matrix.hpp"

namespace foresight {

enum class EventKind : std::uint8_t { Brake, Swerve, Cruise, Turn };
std::string_view to_string(EventKind kind);
EventKind event_kind_from_string(std::string_view name);

// BRAKE: acceleration of -magnitude (m/s^2) along the direction of travel.
// SWERVE: lateral acceleration +magnitude for the first half of the span and
//   -magnitude for the second half (a lane change).
// TURN: velocity rotates at a constant yaw rate of magnitude rad/s.
// CRUISE: zero acceleration.
struct ScriptedEvent {
  double start_s = 0.0;
  double duration_s = 0.0;
  EventKind kind = EventKind::Cruise;
  double magnitude = 0.0;
};

struct WorldConfig {
  int n_views = 3;
  int latent_dim = 16;
  int frame_dim = 64;
  double episode_len_s = 60.0;
  int control_hz = 4;
  double initial_speed = 10.0;
  // Seconds a hazard cue appears in the observations before BRAKE and SWERVE
  // events start.
  double cue_lead_s = 1.0;
  std::vector<ScriptedEvent> event_script;

  int steps() const;
  double dt() const { return 1.0 / control_hz; }
  void validate() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct EventSegment {
  int start_step = 0;
  int end_step = 0;  // exclusive
  EventKind kind = EventKind::Cruise;
  friend bool operator==(const EventSegment&, const EventSegment&) = default;
};

struct Episode {
  int n_steps = 0;
  int n_views = 0;
  int latent_dim = 0;
  int frame_dim = 0;
  int control_hz = 4;
  std::vector<double> x, y;
  std::vector<double> a_x, a_y;
  Matrix obs_latents;  // row k * n_views + v
  Matrix frames;       // row k * n_views + v
  Matrix bev_latents;  // row k
  std::vector<EventSegment> events;

  std::span<const double> latent(int step, int view) const {
    return obs_latents.row(static_cast<std::size_t>(step * n_views + view));
  }
  double time_of(int step) const { return static_cast<double>(step) / control_hz; }

  friend bool operator==(const Episode&, const Episode&) = default;
};

Episode generate_episode(std::uint64_t seed, const WorldConfig& cfg);

// A script of randomly placed BRAKE, SWERVE and TURN events, reproducible
// from seed. Braking is followed by a recovery (negative-magnitude BRAKE) so
// speed stays in a plausible band.
std::vector<ScriptedEvent> random_event_script(std::uint64_t seed, double episode_len_s, int control_hz = 4);

// Fixed linear lift from latent_dim to frame_dim with orthonormal columns,
// generated from a global constant seed.
class FixedDecoder {
 public:
  FixedDecoder(int latent_dim, int frame_dim);
  int latent_dim() const { return latent_dim_; }
  int frame_dim() const { return frame_dim_; }
  const Matrix& matrix() const { return lift_; }

  std::vector<double> decode(std::span<const double> latent) const;
  std::vector<double> encode(std::span<const double> frame) const;

 private:
  int latent_dim_;
  int frame_dim_;
  Matrix lift_;  // frame_dim x latent_dim
};

std::vector<double> decode_latent(std::span<const double> latent, int frame_dim);
std::vector<double> encode_observation(std::span<const double> frame, int latent_dim);

std::vector<EventSegment> event_segments(const Episode& episode);

// Little-endian container: "FSEP", u32 version, u32 steps, views, latent_dim,
// frame_dim, control_hz, then f64 arrays x, y, a_x, a_y, obs, frames, bev and
// the event list.
void write_episode(std::ostream& out, const Episode& ep);
Episode read_episode(std::istream& in);
// step,t,x,y,a_x,a_y,event
void write_episode_csv(std::ostream& out, const Episode& ep);

}  // namespace foresight
