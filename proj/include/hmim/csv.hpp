#pragma once

// Comma-delimited tables with a header row; numeric formatting goes through
// one function so identical runs produce identical bytes.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hmim/common.hpp"

namespace hmim {

inline std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

class CsvWriter {
public:
    CsvWriter() = default;
    CsvWriter(const std::string& path, const std::vector<std::string>& columns) { open(path, columns); }

    void open(const std::string& path, const std::vector<std::string>& columns) {
        file_.open(path);
        if (!file_) throw io_error("cannot open " + path + " for writing");
        path_ = path;
        cols_ = columns.size();
        for (size_t i = 0; i < columns.size(); ++i) file_ << (i ? "," : "") << columns[i];
        file_ << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != cols_)
            throw contract_error("csv row has " + std::to_string(cells.size()) + " cells, header has " +
                                 std::to_string(cols_));
        for (size_t i = 0; i < cells.size(); ++i) file_ << (i ? "," : "") << cells[i];
        file_ << "\n";
        file_.flush();
        if (!file_) throw io_error("write failed: " + path_);
    }

private:
    std::ofstream file_;
    std::string path_;
    size_t cols_ = 0;
};

struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    int column_index(const std::string& name) const {
        for (size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return static_cast<int>(i);
        return -1;
    }

    std::vector<double> numeric(int col) const {
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(std::stod(r[col]));
        return out;
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open " + path);
    CsvTable t;
    std::string line;
    bool header = true;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.empty()) continue;
        if (header) {
            t.columns = std::move(cells);
            header = false;
        } else {
            t.rows.push_back(std::move(cells));
        }
    }
    return t;
}

}  // namespace hmim
