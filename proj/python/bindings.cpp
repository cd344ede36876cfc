// Thin numpy-facing wrapper. Configs cross the boundary as JSON text; the
// Python package turns dicts into that.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "foresight/attention.hpp"
#include "foresight/chunk_layout.hpp"
#include "foresight/errors.hpp"
#include "foresight/metrics.hpp"
#include "foresight/objectives.hpp"
#include "foresight/rng.hpp"
#include "foresight/sparse_mask.hpp"
#include "foresight/synth_world.hpp"
#include "foresight/temporal_sampler.hpp"

namespace py = pybind11;
using namespace foresight;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <class T>
T parse(const std::string& text) {
  T value{};
  if (!text.empty()) {
    from_json(nlohmann::json::parse(text), value);
  }
  return value;
}

Array to_array(const Matrix& m) {
  return Array({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())}, m.data());
}

Array to_array(const std::vector<double>& v) { return Array(static_cast<py::ssize_t>(v.size()), v.data()); }

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) {
    throw PreconditionError("expected a 2-d array");
  }
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.values().begin());
  return m;
}

BlockGrid grid_for(const std::string& layout_json, int n_chunks) {
  const auto cfg = parse<LayoutConfig>(layout_json);
  cfg.validate();
  return block_partition(build_prompt_layout(cfg, n_chunks), cfg.block_size);
}

std::vector<Point2> points(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) {
    throw PreconditionError("trajectory arrays must have shape (n, 2)");
  }
  std::vector<Point2> out;
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    out.push_back({a.at(i, 0), a.at(i, 1)});
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_foresight, m) {
  m.doc() = "chunk-structured attention, sampling and metrics core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<PreconditionError>(m, "PreconditionError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

  m.def(
      "layout_json",
      [](const std::string& layout, int n_chunks) {
        const auto cfg = parse<LayoutConfig>(layout);
        cfg.validate();
        return layout_to_json(build_prompt_layout(cfg, n_chunks)).dump();
      },
      py::arg("layout") = "", py::arg("n_chunks"));

  m.def(
      "block_mask",
      [](const std::string& layout, const std::string& mask, int n_chunks, int group) {
        const auto grid = grid_for(layout, n_chunks);
        const auto bm = build_mask(grid, parse<MaskConfig>(mask), group);
        const auto n = static_cast<py::ssize_t>(bm.n_blocks());
        py::array_t<bool> out({n, n});
        auto view = out.mutable_unchecked<2>();
        for (py::ssize_t q = 0; q < n; ++q) {
          for (py::ssize_t k = 0; k < n; ++k) {
            view(q, k) = bm.contains(static_cast<int>(q), static_cast<int>(k));
          }
        }
        return out;
      },
      py::arg("layout") = "", py::arg("mask") = "", py::arg("n_chunks"), py::arg("group") = 0);

  m.def(
      "sparse_and_dense_attention",
      [](const std::string& layout, const std::string& mask, int n_chunks, int head_dim, std::uint64_t seed,
         int group) {
        const auto grid = grid_for(layout, n_chunks);
        const auto bm = build_mask(grid, parse<MaskConfig>(mask), group);
        const auto in = random_attention_inputs(grid, head_dim, seed);
        Matrix sparse;
        Matrix dense;
        {
          py::gil_scoped_release release;
          sparse = block_sparse_attention(in.q, in.k, in.v, bm, grid);
          dense = dense_attention(in.q, in.k, in.v, expand_block_mask(bm, grid));
        }
        return py::make_tuple(to_array(sparse), to_array(dense));
      },
      py::arg("layout") = "", py::arg("mask") = "", py::arg("n_chunks"), py::arg("head_dim") = 16,
      py::arg("seed") = 0, py::arg("group") = 0);

  m.def(
      "importance_scores",
      [](const Array& ax, const Array& ay, const std::string& cfg) {
        return to_array(importance_scores(to_vector(ax), to_vector(ay), parse<ImportanceConfig>(cfg)));
      },
      py::arg("a_x"), py::arg("a_y"), py::arg("config") = "");
  m.def(
      "sampling_distribution", [](const Array& w, double tau) { return to_array(sampling_distribution(to_vector(w), tau)); },
      py::arg("w"), py::arg("tau"));
  m.def(
      "sample_steps",
      [](const Array& p, int n_steps, int max_gap, std::uint64_t seed) {
        Rng rng(seed);
        return sample_steps(to_vector(p), n_steps, max_gap, rng);
      },
      py::arg("p"), py::arg("n_steps"), py::arg("max_gap"), py::arg("seed") = 0);

  m.def(
      "generate_episode",
      [](std::uint64_t seed, const std::string& world) {
        const auto ep = generate_episode(seed, parse<WorldConfig>(world));
        py::dict d;
        d["x"] = to_array(ep.x);
        d["y"] = to_array(ep.y);
        d["a_x"] = to_array(ep.a_x);
        d["a_y"] = to_array(ep.a_y);
        d["obs_latents"] = to_array(ep.obs_latents).reshape(
            {static_cast<py::ssize_t>(ep.n_steps), static_cast<py::ssize_t>(ep.n_views),
             static_cast<py::ssize_t>(ep.latent_dim)});
        d["bev_latents"] = to_array(ep.bev_latents);
        py::list events;
        for (const auto& e : ep.events) {
          events.append(py::make_tuple(e.start_step, e.end_step, std::string(to_string(e.kind))));
        }
        d["events"] = events;
        return d;
      },
      py::arg("seed"), py::arg("world") = "");
  m.def(
      "random_event_script",
      [](std::uint64_t seed, double episode_len_s) {
        nlohmann::json j;
        WorldConfig c;
        c.episode_len_s = episode_len_s;
        c.event_script = random_event_script(seed, episode_len_s, c.control_hz);
        to_json(j, c);
        return j["event_script"].dump();
      },
      py::arg("seed"), py::arg("episode_len_s") = 60.0);

  m.def(
      "decode_latent", [](const Array& z, int frame_dim) { return to_array(decode_latent(to_vector(z), frame_dim)); },
      py::arg("latent"), py::arg("frame_dim") = 64);
  m.def(
      "encode_observation",
      [](const Array& f, int latent_dim) { return to_array(encode_observation(to_vector(f), latent_dim)); },
      py::arg("frame"), py::arg("latent_dim") = 16);

  m.def(
      "ade_fde",
      [](const Array& pred, const Array& gt) {
        const auto e = ade_fde(TrajectoryPair{points(pred), points(gt)});
        py::dict d;
        d["lat_ade"] = e.lat_ade;
        d["long_ade"] = e.long_ade;
        d["lat_fde"] = e.lat_fde;
        d["long_fde"] = e.long_fde;
        return d;
      },
      py::arg("pred"), py::arg("gt"));
  m.def("cces_total", &cces_total, py::arg("category_values"));

  m.def(
      "rf_interpolate",
      [](const Array& y0, const Array& y1, double t) { return to_array(rf_interpolate(to_vector(y0), to_vector(y1), t)); },
      py::arg("y0"), py::arg("y1"), py::arg("t"));
  m.def(
      "camera_loss",
      [](const Array& pred, const Array& gt, int n_views, bool squared) {
        return camera_loss(to_matrix(pred), to_matrix(gt), n_views, squared);
      },
      py::arg("pred"), py::arg("gt"), py::arg("n_views"), py::arg("squared") = false);
}
