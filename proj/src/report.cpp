// SPDX-License-Identifier: Apache-2.0
#include "viny/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

#include "json.hpp"
#include "viny/errors.hpp"

namespace viny {

bool Selector::matches(const CellKey &k) const {
  auto in = [](const std::vector<std::size_t> &v, std::size_t x) {
    return v.empty() || std::find(v.begin(), v.end(), x) != v.end();
  };
  return in(pretrain_sizes, k.pretrain_size) && in(finetune_sizes, k.finetune_size) &&
         (!intermediate || *intermediate == k.intermediate);
}

Selector parse_selector(const std::vector<std::string> &terms) {
  Selector s;
  for (const auto &term : terms) {
    const auto eq = term.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("selector '" + term + "' is not key=value");
    const std::string key = term.substr(0, eq), value = term.substr(eq + 1);
    if (key == "i" || key == "intermediate") {
      if (value == "on")
        s.intermediate = true;
      else if (value == "off")
        s.intermediate = false;
      else if (value != "both")
        throw std::invalid_argument("selector '" + term + "': expected on, off or both");
      continue;
    }
    std::vector<std::size_t> *list = nullptr;
    if (key == "p" || key == "pretrain")
      list = &s.pretrain_sizes;
    else if (key == "f" || key == "finetune")
      list = &s.finetune_sizes;
    else
      throw std::invalid_argument("selector '" + term + "': unknown key '" + key + "'");
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(item, &pos);
      } catch (const std::logic_error &) {
        pos = 0;
      }
      if (item.empty() || pos != item.size() || item[0] == '-')
        throw std::invalid_argument("selector '" + term + "': bad size '" + item + "'");
      list->push_back(v);
    }
  }
  return s;
}

std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ','))
    out.push_back(cell);
  if (!line.empty() && line.back() == ',')
    out.emplace_back();
  return out;
}

namespace {

using GroupKey = std::tuple<bool, std::size_t, std::size_t>; // intermediate, p, f

struct Group {
  std::size_t expected = 0;
  std::map<int, RunRecord> runs;
};

std::map<GroupKey, Group> collect(const RunStore &store, const Selector &selector) {
  if (!store.has_plan())
    throw NoRecordsError("no records: " + store.root().string() + " holds no plan");
  std::map<GroupKey, Group> groups;
  std::size_t found = 0;
  for (const auto &c : store.plan_cells()) {
    if (!selector.matches(c.key))
      continue;
    auto &g = groups[{c.key.intermediate, c.key.pretrain_size, c.key.finetune_size}];
    ++g.expected;
    if (auto r = store.read_record(c.hash)) {
      g.runs.emplace(c.key.run, std::move(*r));
      ++found;
    }
  }
  if (found == 0)
    throw NoRecordsError("no records in " + store.root().string() +
                         (groups.empty() ? " match the selection" : ""));
  return groups;
}

std::string pct(double v) { return fmt::format("{:.2f}", v); }

double mean_of(const std::vector<double> &v) {
  double s = 0;
  for (double x : v)
    s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

} // namespace

Table emit_table(const RunStore &store, const Selector &selector) {
  const auto groups = collect(store, selector);
  Table t;
  t.csv = "pretrain_size,intermediate,finetune_size,runs,expected_runs,accuracy_mean,"
          "accuracy_stderr,accuracy_std,miou_mean,miou_stderr,miou_std,iou_fg_mean,"
          "iou_bg_mean,iou_unknown_mean,flags\n";
  t.markdown = "# " + store.plan_name() + "\n";
  std::optional<std::pair<bool, std::size_t>> section;
  for (const auto &[gk, g] : groups) {
    const auto &[inter, p, f] = gk;
    TableRow row;
    row.intermediate = inter;
    row.pretrain_size = p;
    row.finetune_size = f;
    row.runs = g.runs.size();
    row.expected_runs = g.expected;
    if (row.runs == 0)
      row.flags.push_back("missing");
    else if (row.runs < row.expected_runs)
      row.flags.push_back("incomplete");
    if (row.runs == 1)
      row.flags.push_back("single_run");

    if (row.runs == 0) {
      row.accuracy = row.miou = "n/a";
      row.fields.assign(9, "");
    } else {
      std::vector<double> acc, mi;
      std::array<std::vector<double>, kTrimapClasses> iou;
      for (const auto &[run, r] : g.runs) {
        acc.push_back(r.metrics.accuracy);
        mi.push_back(r.metrics.miou);
        for (int c = 0; c < kTrimapClasses; ++c)
          if (r.metrics.included[c])
            iou[c].push_back(r.metrics.per_class_iou[c]);
      }
      const auto a = aggregate(acc), m = aggregate(mi);
      row.accuracy = format_pm(a.mean, a.standard_error);
      row.miou = format_pm(m.mean, m.standard_error);
      row.fields = {pct(a.mean), pct(a.standard_error), pct(a.stddev),
                    pct(m.mean), pct(m.standard_error), pct(m.stddev)};
      for (int c = 0; c < kTrimapClasses; ++c)
        row.fields.push_back(iou[c].empty() ? "" : pct(mean_of(iou[c])));
    }

    std::string flags;
    for (const auto &fl : row.flags)
      flags += (flags.empty() ? "" : ";") + fl;
    t.csv += fmt::format("{},{},{},{},{}", p, inter ? "on" : "off", f, row.runs, row.expected_runs);
    for (const auto &cell : row.fields)
      t.csv += "," + cell;
    t.csv += "," + flags + "\n";

    if (!section || *section != std::pair{inter, p}) {
      section = std::pair{inter, p};
      t.markdown += fmt::format("\n## Pre-train {}, intermediate {}\n\n", p == 0 ? "none" : std::to_string(p),
                                inter ? "on" : "off");
      t.markdown += "| Fine-tune | Accuracy | mIoU | Runs |\n|---:|---:|---:|---:|\n";
    }
    const std::string suffix = row.runs == 0 ? "" : "%";
    std::string runs = std::to_string(row.runs);
    if (row.runs < row.expected_runs)
      runs += fmt::format("/{} ({})", row.expected_runs, row.runs == 0 ? "missing" : "incomplete");
    else if (row.runs == 1)
      runs += " (single run)";
    t.markdown += fmt::format("| {} | {}{} | {}{} | {} |\n", f, row.accuracy, suffix, row.miou,
                              suffix, runs);
    t.rows.push_back(std::move(row));
  }
  return t;
}

PlotKind parse_plot_kind(const std::string &name) {
  if (name == "trend")
    return PlotKind::trend;
  if (name == "delta")
    return PlotKind::delta;
  throw std::invalid_argument("unknown plot kind '" + name + "' (expected trend or delta)");
}

namespace {

const char *kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};

std::string render_svg(const std::vector<Series> &series, const std::string &title,
                       const std::string &y_label, bool zero_line) {
  const double W = 640, H = 420, L = 70, R = 170, T = 40, B = 55;
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto &s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.mean[i] - s.err[i]);
      ymax = std::max(ymax, s.mean[i] + s.err[i]);
    }
  if (zero_line) {
    ymin = std::min(ymin, 0.0);
    ymax = std::max(ymax, 0.0);
  }
  const bool log_x = xmin > 0 && xmax / xmin >= 10;
  auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
  double x0 = tx(xmin), x1 = tx(xmax);
  if (x1 - x0 < 1e-12) {
    x0 -= 1;
    x1 += 1;
  }
  if (ymax - ymin < 1e-9) {
    ymin -= 1;
    ymax += 1;
  }
  const double pad = 0.08 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return T + (ymax - y) / (ymax - ymin) * (H - T - B); };

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" "
      "viewBox=\"0 0 {} {}\" font-family=\"sans-serif\" font-size=\"12\">\n",
      W, H, W, H);
  s += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  s += fmt::format("<text x=\"{:.1f}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                   (L + W - R) / 2, title);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L,
                   H - B, W - R);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T,
                   H - B);
  // x ticks at the data positions
  std::set<double> xs;
  for (const auto &se : series)
    xs.insert(se.x.begin(), se.x.end());
  for (double x : xs)
    s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1}\" x2=\"{0:.1f}\" y2=\"{2}\" stroke=\"black\"/>"
                     "<text x=\"{0:.1f}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
                     px(x), H - B, H - B + 5, H - B + 19, x);
  for (int i = 0; i <= 5; ++i) {
    const double y = ymin + (ymax - ymin) * i / 5.0;
    s += fmt::format("<line x1=\"{0}\" y1=\"{1:.1f}\" x2=\"{2}\" y2=\"{1:.1f}\" stroke=\"black\"/>"
                     "<text x=\"{3}\" y=\"{4:.1f}\" text-anchor=\"end\">{5:.2f}</text>\n",
                     L - 5, py(y), L, L - 8, py(y) + 4, y);
  }
  if (zero_line && ymin < 0 && ymax > 0)
    s += fmt::format("<line x1=\"{0}\" y1=\"{1:.1f}\" x2=\"{2}\" y2=\"{1:.1f}\" stroke=\"gray\" "
                     "stroke-dasharray=\"4 3\"/>\n",
                     L, py(0), W - R);
  s += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">Fine-tuning examples{}</text>\n",
                   (L + W - R) / 2, H - 15, log_x ? " (log scale)" : "");
  s += fmt::format("<text transform=\"translate(18 {:.1f}) rotate(-90)\" text-anchor=\"middle\">{}</text>\n",
                   (T + H - B) / 2, y_label);

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto &se = series[k];
    const char *colour = kPalette[k % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < se.x.size(); ++i)
      points += fmt::format("{}{:.1f},{:.1f}", i ? " " : "", px(se.x[i]), py(se.mean[i]));
    s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                     colour, points);
    for (std::size_t i = 0; i < se.x.size(); ++i) {
      const double x = px(se.x[i]);
      s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" "
                       "stroke=\"{3}\"/><circle cx=\"{0:.1f}\" cy=\"{4:.1f}\" r=\"3\" fill=\"{3}\"/>\n",
                       x, py(se.mean[i] - se.err[i]), py(se.mean[i] + se.err[i]), colour,
                       py(se.mean[i]));
    }
    const double ly = T + 10 + 18.0 * static_cast<double>(k);
    s += fmt::format("<line x1=\"{0}\" y1=\"{1:.1f}\" x2=\"{2}\" y2=\"{1:.1f}\" stroke=\"{3}\" "
                     "stroke-width=\"2\"/><text x=\"{4}\" y=\"{5:.1f}\">{6}</text>\n",
                     W - R + 15, ly, W - R + 35, colour, W - R + 40, ly + 4, se.name);
  }
  s += "</svg>\n";
  return s;
}

std::string series_name(std::size_t p, bool inter, bool show_inter) {
  std::string n = p == 0 ? "no pre-training" : "pre-train " + std::to_string(p);
  if (show_inter)
    n += inter ? " + intermediate" : "";
  return n;
}

} // namespace

Plot emit_plot(const RunStore &store, PlotKind kind, const Selector &selector) {
  const auto groups = collect(store, selector);
  Plot plot;
  if (kind == PlotKind::trend) {
    std::set<bool> flags;
    for (const auto &[gk, g] : groups)
      flags.insert(std::get<0>(gk));
    std::map<std::pair<bool, std::size_t>, Series> by;
    for (const auto &[gk, g] : groups) {
      const auto &[inter, p, f] = gk;
      if (g.runs.empty()) {
        plot.warnings.push_back(fmt::format("no records for p={} i={} f={}", p, inter ? "on" : "off", f));
        continue;
      }
      std::vector<double> mi;
      for (const auto &[run, r] : g.runs)
        mi.push_back(r.metrics.miou);
      const auto a = aggregate(mi);
      auto &s = by[{inter, p}];
      s.name = series_name(p, inter, flags.size() > 1 || inter);
      s.pretrain_size = p;
      s.intermediate = inter;
      s.x.push_back(static_cast<double>(f));
      s.mean.push_back(a.mean);
      s.err.push_back(a.standard_error);
      s.n.push_back(a.n);
    }
    for (auto &[k, s] : by)
      plot.series.push_back(std::move(s));
    plot.csv = "series,pretrain_size,intermediate,finetune_size,n,miou_mean,miou_stderr\n";
    for (const auto &s : plot.series)
      for (std::size_t i = 0; i < s.x.size(); ++i)
        plot.csv += fmt::format("{},{},{},{},{},{},{}\n", s.name, s.pretrain_size,
                                s.intermediate ? "on" : "off", s.x[i], s.n[i], pct(s.mean[i]),
                                pct(s.err[i]));
  } else {
    std::map<std::size_t, Series> by;
    std::set<std::pair<std::size_t, std::size_t>> pf;
    for (const auto &[gk, g] : groups)
      pf.insert({std::get<1>(gk), std::get<2>(gk)});
    for (const auto &[p, f] : pf) {
      const auto on = groups.find({true, p, f}), off = groups.find({false, p, f});
      std::vector<double> d;
      if (on != groups.end() && off != groups.end())
        for (const auto &[run, r] : on->second.runs)
          if (auto it = off->second.runs.find(run); it != off->second.runs.end())
            d.push_back(r.metrics.miou - it->second.metrics.miou);
      if (d.empty()) {
        plot.warnings.push_back(
            fmt::format("no paired runs with and without intermediate at p={} f={}", p, f));
        continue;
      }
      const auto a = aggregate(d);
      auto &s = by[p];
      s.name = series_name(p, true, false);
      s.pretrain_size = p;
      s.intermediate = true;
      s.x.push_back(static_cast<double>(f));
      s.mean.push_back(a.mean);
      s.err.push_back(a.standard_error);
      s.n.push_back(a.n);
    }
    for (auto &[k, s] : by)
      plot.series.push_back(std::move(s));
    plot.csv = "series,pretrain_size,finetune_size,n,delta_mean,delta_stderr\n";
    for (const auto &s : plot.series)
      for (std::size_t i = 0; i < s.x.size(); ++i)
        plot.csv += fmt::format("{},{},{},{},{},{}\n", s.name, s.pretrain_size, s.x[i], s.n[i],
                                pct(s.mean[i]), pct(s.err[i]));
  }
  if (plot.series.empty())
    throw EmptySeriesError(kind == PlotKind::delta
                               ? "empty series: no cells with both intermediate on and off"
                               : "empty series: no completed cells");
  plot.svg = kind == PlotKind::trend
                 ? render_svg(plot.series, "mIoU by fine-tuning size", "mIoU (%)", false)
                 : render_svg(plot.series, "mIoU change from intermediate fine-tuning",
                              "with - without (mIoU points)", true);
  return plot;
}

std::string inspect_cell(const RunStore &store, const std::string &cell) {
  std::string hash;
  std::optional<CellKey> key;
  const bool looks_like_hash =
      cell.size() == 16 && cell.find_first_not_of("0123456789abcdef") == std::string::npos;
  if (looks_like_hash) {
    hash = cell;
  } else {
    key = CellKey::parse(cell);
    for (const auto &c : store.plan_cells())
      if (c.key == *key)
        hash = c.hash;
    if (hash.empty())
      throw NoRecordsError("no records: cell '" + cell + "' is not part of the stored plan");
  }

  if (auto r = store.read_record(hash)) {
    std::string out = fmt::format("cell        {}\nhash        {}\nplan        {}\nstatus      complete\n",
                                  r->key.label(), r->config_hash, r->plan_name);
    out += fmt::format("seeds       init {:016x} pretrain {:016x} intermediate {:016x} finetune "
                       "{:016x} subset {:016x}\n",
                       r->seeds.init, r->seeds.pretrain, r->seeds.intermediate, r->seeds.finetune,
                       r->seeds.subset);
    out += fmt::format("samples     train {} test {}\n", r->train_samples, r->test_samples);
    out += fmt::format("accuracy    {:.2f}%\nmIoU        {:.2f}%\n", r->metrics.accuracy, r->metrics.miou);
    const char *names[] = {"fg", "bg", "unknown"};
    for (int c = 0; c < kTrimapClasses; ++c)
      out += fmt::format("  {:<8}  IoU {:>6.2f}  precision {:>6.2f}  recall {:>6.2f}\n", names[c],
                         r->metrics.per_class_iou[c], r->metrics.per_class_precision[c],
                         r->metrics.per_class_recall[c]);
    for (const auto &[phase, secs] : r->wall_clock)
      out += fmt::format("time        {:<12} {:.2f} s\n", phase, secs);
    for (const auto &[phase, path] : r->checkpoints)
      out += fmt::format("checkpoint  {:<12} {}\n", phase, path);
    out += "history\n" + history_csv(r->history);
    return out;
  }
  for (const auto &f : store.failures())
    if (f.config_hash == hash)
      return fmt::format("cell        {}\nhash        {}\nstatus      failed\nphase       {}\n"
                         "category    {}\nmessage     {}\n",
                         f.key.label(), hash, f.phase, f.category, f.message);
  throw NoRecordsError("no records for cell " + (key ? key->label() : cell) + " (" + hash + ")");
}

} // namespace viny
