#pragma once

#include <charconv>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mstgat {

// Minimal CSV support for the fixed-schema files this project exchanges:
// comma-separated, no quoting, one header line. Blank lines are skipped.

struct CsvFile {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        std::string field = line.substr(start, comma == std::string::npos ? comma : comma - start);
        while (!field.empty() && (field.back() == '\r' || field.back() == ' '))
            field.pop_back();
        while (!field.empty() && field.front() == ' ') field.erase(field.begin());
        out.push_back(std::move(field));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline CsvFile read_csv(const std::string& path, const std::vector<std::string>& expected_header) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    CsvFile csv;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    csv.header = split_csv_line(line);
    if (csv.header != expected_header) {
        std::string want, got;
        for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
        for (const auto& h : csv.header) got += (got.empty() ? "" : ",") + h;
        throw std::runtime_error(path + ": unexpected header \"" + got + "\", expected \"" +
                                 want + "\"");
    }
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        csv.rows.push_back(split_csv_line(line));
    }
    return csv;
}

inline bool parse_double_field(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc{} && ptr == end;
}

inline bool parse_int_field(const std::string& s, std::int64_t& out) {
    if (s.empty()) return false;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc{} && ptr == end;
}

}  // namespace mstgat
