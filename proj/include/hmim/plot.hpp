#pragma once

// Static SVG line plots of CSV columns. The first column of each file is the
// x axis; one polyline per selected (file, column) pair, legend entries
// "<file stem>:<column>" when several files are overlaid.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hmim/common.hpp"
#include "hmim/csv.hpp"

namespace hmim {

struct PlotSeries {
    std::string label;
    std::vector<double> x, y;
};

inline void write_svg_plot(const std::string& out_path, const std::vector<PlotSeries>& series,
                           const std::string& x_label, const std::string& y_label) {
    if (series.empty()) throw config_error("plot: no series to draw");
    const int width = 720, height = 440;
    const int ml = 60, mr = 160, mt = 20, mb = 45;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double xmin = series[0].x[0], xmax = xmin, ymin = series[0].y[0], ymax = ymin;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;

    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

    std::ofstream f(out_path);
    if (!f) throw io_error("cannot open " + out_path + " for writing");
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    f << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = xmin + (xmax - xmin) * t / 4.0;
        const double yv = ymin + (ymax - ymin) * t / 4.0;
        f << "<text x=\"" << px(xv) << "\" y=\"" << mt + ph + 18
          << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt_num(xv) << "</text>\n";
        f << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4
          << "\" font-size=\"11\" text-anchor=\"end\">" << fmt_num(yv) << "</text>\n";
    }
    f << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
      << "\" font-size=\"12\" text-anchor=\"middle\">" << x_label << "</text>\n";
    f << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" font-size=\"12\" text-anchor=\"middle\" "
      << "transform=\"rotate(-90 14 " << mt + ph / 2 << ")\">" << y_label << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = palette[si % 8];
        f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < s.x.size(); ++i)
            f << px(s.x[i]) << "," << py(s.y[i]) << (i + 1 < s.x.size() ? " " : "");
        f << "\"/>\n";
        const double ly = mt + 14 + 16 * static_cast<double>(si);
        f << "<line x1=\"" << ml + pw + 8 << "\" y1=\"" << ly - 4 << "\" x2=\"" << ml + pw + 28
          << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        f << "<text x=\"" << ml + pw + 32 << "\" y=\"" << ly << "\" font-size=\"11\">" << s.label
          << "</text>\n";
    }
    f << "</svg>\n";
    if (!f) throw io_error("write failed: " + out_path);
}

// columns: names within each CSV (the first CSV column is x)
inline void plot_csvs(const std::vector<std::string>& csv_paths, const std::vector<std::string>& columns,
                      const std::string& out_svg) {
    if (csv_paths.empty()) throw config_error("plot: no csv files given");
    if (columns.empty()) throw config_error("plot: no columns selected");
    std::vector<PlotSeries> series;
    for (const auto& path : csv_paths) {
        const CsvTable t = read_csv(path);
        if (t.rows.empty()) throw config_error("plot: " + path + " has no data rows");
        const std::string stem = std::filesystem::path(path).stem().string();
        const std::vector<double> xs = t.numeric(0);
        for (const auto& col : columns) {
            const int ci = t.column_index(col);
            if (ci < 0) throw config_error("plot: " + path + " has no column '" + col + "'");
            PlotSeries s;
            s.label = csv_paths.size() > 1 ? stem + ":" + col : col;
            s.x = xs;
            s.y = t.numeric(ci);
            series.push_back(std::move(s));
        }
    }
    write_svg_plot(out_svg, series, read_csv(csv_paths[0]).columns[0], columns.size() == 1 ? columns[0] : "value");
}

}  // namespace hmim
