#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dropgen/io.hpp"
#include "dropgen/tensor.hpp"

namespace dropgen {

// Deterministic SVG renderer: fixed canvas, fixed palette, no timestamps, so
// identical inputs give identical bytes.
namespace svg {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr double kMarginLeft = 64, kMarginRight = 16, kMarginTop = 24, kMarginBottom = 44;

inline const std::vector<std::string>& palette() {
    static const std::vector<std::string> colors = {"#2563eb", "#dc2626", "#059669",
                                                    "#d97706", "#7c3aed", "#4b5563"};
    return colors;
}

inline std::string num(double v) {
    // fixed 2-decimal coordinates keep the output diffable
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

struct Frame {
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;

    double sx(double x) const {
        return kMarginLeft + (x - x_min) / (x_max - x_min) * (kWidth - kMarginLeft - kMarginRight);
    }
    double sy(double y) const {
        return kHeight - kMarginBottom -
               (y - y_min) / (y_max - y_min) * (kHeight - kMarginTop - kMarginBottom);
    }
};

inline void pad_frame(Frame& f) {
    if (f.x_max <= f.x_min) f.x_max = f.x_min + 1;
    if (f.y_max <= f.y_min) f.y_max = f.y_min + 1;
    const double dy = 0.05 * (f.y_max - f.y_min);
    f.y_min -= dy;
    f.y_max += dy;
}

inline std::string header() {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) +
           "\" height=\"" + std::to_string(kHeight) +
           "\" viewBox=\"0 0 " + std::to_string(kWidth) + " " + std::to_string(kHeight) +
           "\" font-family=\"monospace\" font-size=\"12\">\n"
           "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline std::string axes(const Frame& f, const std::string& x_label,
                        const std::string& y_label) {
    std::string out;
    out += "<line x1=\"" + num(f.sx(f.x_min)) + "\" y1=\"" + num(f.sy(f.y_min)) + "\" x2=\"" +
           num(f.sx(f.x_max)) + "\" y2=\"" + num(f.sy(f.y_min)) +
           "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    out += "<line x1=\"" + num(f.sx(f.x_min)) + "\" y1=\"" + num(f.sy(f.y_min)) + "\" x2=\"" +
           num(f.sx(f.x_min)) + "\" y2=\"" + num(f.sy(f.y_max)) +
           "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double x = f.x_min + (f.x_max - f.x_min) * i / 4.0;
        const double y = f.y_min + (f.y_max - f.y_min) * i / 4.0;
        out += "<text x=\"" + num(f.sx(x)) + "\" y=\"" + num(f.sy(f.y_min) + 16) +
               "\" text-anchor=\"middle\">" + fmt_double(std::round(x * 1000) / 1000) +
               "</text>\n";
        out += "<text x=\"" + num(f.sx(f.x_min) - 6) + "\" y=\"" + num(f.sy(y) + 4) +
               "\" text-anchor=\"end\">" + fmt_double(std::round(y * 1000) / 1000) +
               "</text>\n";
    }
    out += "<text x=\"" + num((kMarginLeft + kWidth - kMarginRight) / 2) + "\" y=\"" +
           num(kHeight - 8) + "\" text-anchor=\"middle\">" + x_label + "</text>\n";
    out += "<text x=\"14\" y=\"" + num(kMarginTop - 8) + "\">" + y_label + "</text>\n";
    return out;
}

inline std::string polyline(const Frame& f, const std::vector<std::pair<double, double>>& pts,
                            const std::string& color, bool dashed = false) {
    std::string out = "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"";
    if (dashed) out += " stroke-dasharray=\"6 3\"";
    out += " points=\"";
    for (const auto& [x, y] : pts) out += num(f.sx(x)) + "," + num(f.sy(y)) + " ";
    out += "\"/>\n";
    for (const auto& [x, y] : pts)
        out += "<circle cx=\"" + num(f.sx(x)) + "\" cy=\"" + num(f.sy(y)) +
               "\" r=\"3\" fill=\"" + color + "\"/>\n";
    return out;
}

inline std::string legend_entry(int index, const std::string& color, const std::string& label,
                                bool dashed = false) {
    const double y = kMarginTop + 16.0 * index;
    std::string out = "<line x1=\"" + num(kWidth - 170.0) + "\" y1=\"" + num(y) + "\" x2=\"" +
                      num(kWidth - 146.0) + "\" y2=\"" + num(y) + "\" stroke=\"" + color +
                      "\" stroke-width=\"2\"";
    if (dashed) out += " stroke-dasharray=\"6 3\"";
    out += "/>\n";
    out += "<text x=\"" + num(kWidth - 140.0) + "\" y=\"" + num(y + 4) + "\">" + label +
           "</text>\n";
    return out;
}

}  // namespace svg

enum class PlotKind { sweep_curve, alignment_histogram, sensitivity_bars, robustness_curve };

inline PlotKind plot_kind_from_name(const std::string& s) {
    if (s == "sweep-curve") return PlotKind::sweep_curve;
    if (s == "alignment-histogram") return PlotKind::alignment_histogram;
    if (s == "sensitivity-bars") return PlotKind::sensitivity_bars;
    if (s == "robustness-curve") return PlotKind::robustness_curve;
    contract_fail("unknown plot kind: " + s);
}

inline void require_columns(const CsvTable& t, const std::vector<std::string>& cols,
                            const std::string& kind) {
    std::string missing;
    for (const auto& c : cols)
        if (t.column(c) < 0) missing += (missing.empty() ? "" : ", ") + c;
    check(missing.empty(), kind + " plot: csv is missing columns: " + missing);
}

// Median in-domain and OOD Dice versus dropout probability, one curve pair
// per training input mode.
inline std::string plot_sweep_curve(const CsvTable& t) {
    require_columns(t, {"seed", "p", "input_mode", "in_domain_dice", "ood_dice"}, "sweep-curve");
    const int c_seed = t.column("seed"), c_p = t.column("p"), c_mode = t.column("input_mode");
    const int c_in = t.column("in_domain_dice"), c_ood = t.column("ood_dice");
    // medians per (mode, p)
    std::map<std::string, std::map<double, std::pair<double, double>>> curves;
    for (size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r][static_cast<size_t>(c_seed)] != "median") continue;
        const std::string mode = t.rows[r][static_cast<size_t>(c_mode)];
        const double p = t.number(r, c_p);
        const double in_d = t.number(r, c_in);
        const std::string ood_raw = t.rows[r][static_cast<size_t>(c_ood)];
        const double ood = ood_raw == "nan" ? std::nan("") : t.number(r, c_ood);
        curves[mode][p] = {in_d, ood};
    }
    check(!curves.empty(), "sweep-curve plot: no median rows found");
    svg::Frame f;
    f.x_min = 1e300;
    f.x_max = -1e300;
    f.y_min = 0.0;
    f.y_max = 1.0;
    for (const auto& [mode, pts] : curves)
        for (const auto& [p, v] : pts) {
            f.x_min = std::min(f.x_min, p);
            f.x_max = std::max(f.x_max, p);
        }
    svg::pad_frame(f);
    std::string out = svg::header() + svg::axes(f, "dropout probability", "Dice (median)");
    int idx = 0, legend = 0;
    for (const auto& [mode, pts] : curves) {
        const std::string color = svg::palette()[static_cast<size_t>(idx) % 6];
        std::vector<std::pair<double, double>> in_pts, ood_pts;
        for (const auto& [p, v] : pts) {
            in_pts.push_back({p, v.first});
            if (!std::isnan(v.second)) ood_pts.push_back({p, v.second});
        }
        out += svg::polyline(f, in_pts, color, false);
        out += svg::legend_entry(legend++, color, mode + " in-domain", false);
        if (!ood_pts.empty()) {
            out += svg::polyline(f, ood_pts, color, true);
            out += svg::legend_entry(legend++, color, mode + " ood", true);
        }
        ++idx;
    }
    return out + "</svg>\n";
}

// 20 equal bins over [-1, 1]; bin counts sum to the row count.
inline std::vector<long> alignment_bins(const CsvTable& t) {
    require_columns(t, {"step", "cosine"}, "alignment-histogram");
    const int c_cos = t.column("cosine");
    std::vector<long> bins(20, 0);
    for (size_t r = 0; r < t.rows.size(); ++r) {
        const double v = t.number(r, c_cos);
        int b = static_cast<int>((v + 1.0) / 2.0 * 20.0);
        b = std::clamp(b, 0, 19);
        bins[static_cast<size_t>(b)]++;
    }
    return bins;
}

// Histogram of alignment cosines over [-1, 1] with 20 bins.
inline std::string plot_alignment_histogram(const CsvTable& t) {
    const std::vector<long> bins = alignment_bins(t);
    check(!t.rows.empty(), "alignment-histogram plot: no rows");
    const long peak = *std::max_element(bins.begin(), bins.end());
    svg::Frame f;
    f.x_min = -1.0;
    f.x_max = 1.0;
    f.y_min = 0.0;
    f.y_max = static_cast<double>(peak);
    svg::pad_frame(f);
    std::string out = svg::header() + svg::axes(f, "cosine similarity", "count");
    for (size_t b = 0; b < bins.size(); ++b) {
        const double x0 = -1.0 + 0.1 * static_cast<double>(b);
        const double x1 = x0 + 0.1;
        const double y = static_cast<double>(bins[b]);
        out += "<rect x=\"" + svg::num(f.sx(x0) + 1) + "\" y=\"" + svg::num(f.sy(y)) +
               "\" width=\"" + svg::num(f.sx(x1) - f.sx(x0) - 2) + "\" height=\"" +
               svg::num(f.sy(0) - f.sy(y)) + "\" fill=\"#2563eb\"/>\n";
    }
    out += "<line x1=\"" + svg::num(f.sx(0)) + "\" y1=\"" + svg::num(f.sy(f.y_min)) +
           "\" x2=\"" + svg::num(f.sx(0)) + "\" y2=\"" + svg::num(f.sy(f.y_max)) +
           "\" stroke=\"#4b5563\" stroke-dasharray=\"4 3\"/>\n";
    return out + "</svg>\n";
}

// Paired bars of Dice drops when removing the image or representation block.
inline std::string plot_sensitivity_bars(const CsvTable& t) {
    require_columns(t, {"label", "delta_drop_image", "delta_drop_reps"}, "sensitivity-bars");
    const int c_label = t.column("label");
    const int c_img = t.column("delta_drop_image");
    const int c_rep = t.column("delta_drop_reps");
    check(!t.rows.empty(), "sensitivity-bars plot: no rows");
    double lo = 0.0, hi = 0.0;
    for (size_t r = 0; r < t.rows.size(); ++r) {
        lo = std::min({lo, t.number(r, c_img), t.number(r, c_rep)});
        hi = std::max({hi, t.number(r, c_img), t.number(r, c_rep)});
    }
    svg::Frame f;
    f.x_min = 0;
    f.x_max = static_cast<double>(t.rows.size());
    f.y_min = lo;
    f.y_max = hi;
    svg::pad_frame(f);
    std::string out = svg::header() + svg::axes(f, "", "delta Dice");
    for (size_t r = 0; r < t.rows.size(); ++r) {
        const double img = t.number(r, c_img);
        const double rep = t.number(r, c_rep);
        const double x = static_cast<double>(r);
        auto bar = [&](double x0, double x1, double v, const std::string& color) {
            const double y_top = std::max(v, 0.0), y_bot = std::min(v, 0.0);
            return "<rect x=\"" + svg::num(f.sx(x0)) + "\" y=\"" + svg::num(f.sy(y_top)) +
                   "\" width=\"" + svg::num(f.sx(x1) - f.sx(x0)) + "\" height=\"" +
                   svg::num(f.sy(y_bot) - f.sy(y_top)) + "\" fill=\"" + color + "\"/>\n";
        };
        out += bar(x + 0.15, x + 0.45, img, "#dc2626");
        out += bar(x + 0.55, x + 0.85, rep, "#2563eb");
        out += "<text x=\"" + svg::num(f.sx(x + 0.5)) + "\" y=\"" +
               svg::num(f.sy(f.y_min) + 16) + "\" text-anchor=\"middle\">" +
               t.rows[r][static_cast<size_t>(c_label)] + "</text>\n";
    }
    out += svg::legend_entry(0, "#dc2626", "drop image");
    out += svg::legend_entry(1, "#2563eb", "drop reps");
    return out + "</svg>\n";
}

// Mean metric versus perturbation level, one curve per group column value.
inline std::string plot_robustness_curve(const CsvTable& t) {
    require_columns(t, {"alpha", "mean_dice"}, "robustness-curve");
    const int c_alpha = t.column("alpha");
    const int c_dice = t.column("mean_dice");
    const int c_group = t.column("group");  // optional
    std::map<std::string, std::vector<std::pair<double, double>>> curves;
    for (size_t r = 0; r < t.rows.size(); ++r) {
        const std::string g =
            c_group >= 0 ? t.rows[r][static_cast<size_t>(c_group)] : std::string("run");
        curves[g].push_back({t.number(r, c_alpha), t.number(r, c_dice)});
    }
    check(!curves.empty(), "robustness-curve plot: no rows");
    svg::Frame f;
    f.x_min = 1e300;
    f.x_max = -1e300;
    f.y_min = 0.0;
    f.y_max = 1.0;
    for (auto& [g, pts] : curves) {
        std::sort(pts.begin(), pts.end());
        for (const auto& [x, y] : pts) {
            f.x_min = std::min(f.x_min, x);
            f.x_max = std::max(f.x_max, x);
        }
    }
    svg::pad_frame(f);
    std::string out = svg::header() + svg::axes(f, "perturbation level", "Dice");
    int idx = 0;
    for (const auto& [g, pts] : curves) {
        const std::string color = svg::palette()[static_cast<size_t>(idx) % 6];
        out += svg::polyline(f, pts, color);
        out += svg::legend_entry(idx, color, g);
        ++idx;
    }
    return out + "</svg>\n";
}

inline std::string render_plot(const CsvTable& table, PlotKind kind) {
    switch (kind) {
        case PlotKind::sweep_curve: return plot_sweep_curve(table);
        case PlotKind::alignment_histogram: return plot_alignment_histogram(table);
        case PlotKind::sensitivity_bars: return plot_sensitivity_bars(table);
        case PlotKind::robustness_curve: return plot_robustness_curve(table);
    }
    contract_fail("unknown plot kind");
}

}  // namespace dropgen
