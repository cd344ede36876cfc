#include "foresight/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "foresight/errors.hpp"

namespace foresight {

DisplacementErrors ade_fde(const TrajectoryPair& pair) {
  const std::size_t n = pair.gt.size();
  if (n == 0) {
    throw PreconditionError("ade_fde: empty trajectory");
  }
  if (pair.pred.size() != n) {
    throw PreconditionError("ade_fde: predicted and ground-truth lengths differ");
  }
  DisplacementErrors out;
  double hx = 1.0;
  double hy = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double tx = 0.0;
    double ty = 0.0;
    if (k + 1 < n) {
      tx = pair.gt[k + 1].x - pair.gt[k].x;
      ty = pair.gt[k + 1].y - pair.gt[k].y;
    } else if (k > 0) {
      tx = pair.gt[k].x - pair.gt[k - 1].x;
      ty = pair.gt[k].y - pair.gt[k - 1].y;
    }
    const double len = std::hypot(tx, ty);
    if (len > 0.0) {
      hx = tx / len;
      hy = ty / len;
    }
    const double ex = pair.pred[k].x - pair.gt[k].x;
    const double ey = pair.pred[k].y - pair.gt[k].y;
    const double lon = std::abs(ex * hx + ey * hy);
    const double lat = std::abs(-ex * hy + ey * hx);
    out.long_ade += lon;
    out.lat_ade += lat;
    if (k + 1 == n) {
      out.long_fde = lon;
      out.lat_fde = lat;
    }
  }
  out.long_ade /= static_cast<double>(n);
  out.lat_ade /= static_cast<double>(n);
  return out;
}

std::string_view to_string(CcesCategory c) {
  switch (c) {
    case CcesCategory::Compliance:
      return "compliance";
    case CcesCategory::Comfort:
      return "comfort";
    case CcesCategory::Efficiency:
      return "efficiency";
    case CcesCategory::Safety:
      return "safety";
  }
  return "?";
}

CcesCategory cces_category_from_string(std::string_view name) {
  for (auto c : {CcesCategory::Compliance, CcesCategory::Comfort, CcesCategory::Efficiency, CcesCategory::Safety}) {
    if (to_string(c) == name) {
      return c;
    }
  }
  throw ConfigError("unknown CCES category '" + std::string(name) + "'");
}

double cces_total(const std::array<double, 4>& v) { return v[0] + v[1] + v[2] + v[3]; }

std::vector<CcesScores> cces_aggregate(const CcesTable& table) {
  const std::size_t n_metrics = table.metrics.size();
  if (table.category.size() != n_metrics) {
    throw PreconditionError("cces_aggregate: every metric needs exactly one category");
  }
  if (table.fail_rate.size() != table.methods.size()) {
    throw PreconditionError("cces_aggregate: fail-rate rows do not match methods");
  }
  const auto ref_it = std::find(table.methods.begin(), table.methods.end(), table.reference);
  if (ref_it == table.methods.end()) {
    throw ConfigError("cces_aggregate: reference method '" + table.reference + "' not in table");
  }
  const auto& ref = table.fail_rate[static_cast<std::size_t>(ref_it - table.methods.begin())];
  for (std::size_t m = 0; m < n_metrics; ++m) {
    if (!(ref[m] > 0.0)) {
      throw DomainError("cces_aggregate: reference fail rate for metric '" + table.metrics[m] +
                        "' is zero; ratios are undefined");
    }
  }
  std::array<int, 4> per_category{};
  for (auto c : table.category) {
    ++per_category[static_cast<std::size_t>(c)];
  }
  std::vector<CcesScores> out;
  for (std::size_t i = 0; i < table.methods.size(); ++i) {
    const auto& rates = table.fail_rate[i];
    if (rates.size() != n_metrics) {
      throw PreconditionError("cces_aggregate: method '" + table.methods[i] + "' has a missing metric");
    }
    CcesScores s;
    s.method = table.methods[i];
    for (std::size_t m = 0; m < n_metrics; ++m) {
      if (rates[m] < 0.0) {
        throw DomainError("cces_aggregate: negative fail rate");
      }
      s.category[static_cast<std::size_t>(table.category[m])] += rates[m] / ref[m];
    }
    for (std::size_t c = 0; c < 4; ++c) {
      if (per_category[c] == 0) {
        throw PreconditionError("cces_aggregate: category '" + std::string(to_string(static_cast<CcesCategory>(c))) +
                                "' has no metrics");
      }
      s.category[c] /= per_category[c];
    }
    s.total = cces_total(s.category);
    out.push_back(s);
  }
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) {
    fields.push_back(f);
  }
  return fields;
}

}  // namespace

CcesTable read_cces_csv(std::istream& in, const std::string& reference) {
  CcesTable t;
  t.reference = reference;
  std::string line;
  if (!std::getline(in, line) || line.rfind("method,metric,category,fail_rate", 0) != 0) {
    throw ConfigError("CCES csv: expected header method,metric,category,fail_rate");
  }
  std::map<std::string, std::map<std::string, double>> rates;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 4) {
      throw ConfigError("CCES csv: malformed row '" + line + "'");
    }
    if (std::find(t.methods.begin(), t.methods.end(), f[0]) == t.methods.end()) {
      t.methods.push_back(f[0]);
    }
    const auto cat = cces_category_from_string(f[2]);
    const auto mit = std::find(t.metrics.begin(), t.metrics.end(), f[1]);
    if (mit == t.metrics.end()) {
      t.metrics.push_back(f[1]);
      t.category.push_back(cat);
    } else if (t.category[static_cast<std::size_t>(mit - t.metrics.begin())] != cat) {
      throw ConfigError("CCES csv: metric '" + f[1] + "' mapped to two categories");
    }
    rates[f[0]][f[1]] = std::stod(f[3]);
  }
  for (const auto& m : t.methods) {
    std::vector<double> row;
    for (const auto& metric : t.metrics) {
      const auto it = rates[m].find(metric);
      if (it == rates[m].end()) {
        throw ConfigError("CCES csv: method '" + m + "' lacks metric '" + metric + "'");
      }
      row.push_back(it->second);
    }
    t.fail_rate.push_back(row);
  }
  return t;
}

void write_cces_csv(std::ostream& out, const std::vector<CcesScores>& scores) {
  out << "method,compliance,comfort,efficiency,safety,total\n";
  for (const auto& s : scores) {
    out << s.method;
    for (double v : s.category) {
      out << ',' << v;
    }
    out << ',' << s.total << '\n';
  }
}

bool step_in_event(const Episode& episode, int step) {
  return std::any_of(episode.events.begin(), episode.events.end(),
                     [step](const EventSegment& e) { return e.start_step <= step && step < e.end_step; });
}

DriftReport rollout_drift(const RolloutFrames& trace, const Episode& episode) {
  if (trace.steps.size() != trace.latents.size()) {
    throw PreconditionError("rollout_drift: trace steps and latents disagree");
  }
  DriftReport r;
  const auto V = static_cast<std::size_t>(episode.n_views);
  const auto d = static_cast<std::size_t>(episode.latent_dim);
  double event_sum = 0.0;
  double other_sum = 0.0;
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const int step = trace.steps[i];
    const Matrix& pred = trace.latents[i];
    if (step < 0 || step >= episode.n_steps) {
      throw PreconditionError("rollout_drift: trace step " + std::to_string(step) + " is outside the episode");
    }
    if (pred.rows() != V || pred.cols() != d) {
      throw PreconditionError("rollout_drift: trace latents do not match the episode's views/dimension");
    }
    double err = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const auto gt = episode.latent(step, static_cast<int>(v));
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double e = pred(v, c) - gt[c];
        sq += e * e;
      }
      err += std::sqrt(sq);
    }
    err /= static_cast<double>(V);
    r.steps.push_back(step);
    r.error.push_back(err);
    if (step_in_event(episode, step)) {
      event_sum += err;
      ++r.event_steps;
    } else {
      other_sum += err;
      ++r.non_event_steps;
    }
  }
  r.event_mean = r.event_steps > 0 ? event_sum / r.event_steps : 0.0;
  r.non_event_mean = r.non_event_steps > 0 ? other_sum / r.non_event_steps : 0.0;
  return r;
}

void write_drift_csv(std::ostream& out, const DriftReport& report, const Episode& episode) {
  out << "step,error,in_event\n";
  for (std::size_t i = 0; i < report.steps.size(); ++i) {
    out << report.steps[i] << ',' << report.error[i] << ',' << (step_in_event(episode, report.steps[i]) ? 1 : 0)
        << '\n';
  }
}

}  // namespace foresight
