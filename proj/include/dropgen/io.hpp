#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "dropgen/envs.hpp"
#include "dropgen/tensor.hpp"

namespace dropgen {

namespace fs = std::filesystem;

// Shortest round-trip decimal form; identical bytes for identical doubles.
inline std::string fmt_double(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Write-temp-then-rename so interrupted runs never leave partial files.
inline void atomic_write(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline json parse_json_file(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error("parse error in " + path.string() + ": " + e.what());
    }
}

// CSV with '.' decimals, ',' separators, LF line endings, UTF-8.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) {
        for (size_t i = 0; i < header.size(); ++i) {
            if (i) out_ += ',';
            out_ += header[i];
        }
        out_ += '\n';
        columns_ = header.size();
    }

    void row(const std::vector<std::string>& cells) {
        check(cells.size() == columns_, "csv row width mismatch");
        for (size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ += ',';
            out_ += cells[i];
        }
        out_ += '\n';
    }

    const std::string& str() const { return out_; }

private:
    std::string out_;
    size_t columns_ = 0;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }

    double number(size_t row, int col) const {
        return std::stod(rows[row][static_cast<size_t>(col)]);
    }
};

inline CsvTable parse_csv(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (first) {
            t.header = cells;
            first = false;
        } else {
            t.rows.push_back(cells);
        }
    }
    return t;
}

// -- binary dataset container ----------------------------------------------
//
// Layout: magic "DGTC", u32 version, u64 manifest length, manifest JSON
// (spec hash, seed, env, shapes), then raw little-endian doubles and int32
// labels, sample-major.

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint32_t get_u32(const std::string& in, size_t& off) {
    if (off + 4 > in.size()) throw std::runtime_error("dataset container truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    off += 4;
    return v;
}

inline uint64_t get_u64(const std::string& in, size_t& off) {
    if (off + 8 > in.size()) throw std::runtime_error("dataset container truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    off += 8;
    return v;
}

inline void save_dataset(const Dataset& d, const fs::path& path) {
    json manifest;
    manifest["spec_hash"] = d.spec_hash;
    manifest["seed"] = d.seed;
    manifest["num_classes"] = d.num_classes;
    manifest["n_u"] = d.n_u;
    manifest["n_s"] = d.n_s;
    manifest["length"] = d.length;
    manifest["count"] = d.size();
    std::vector<std::string> envs;
    for (const auto& s : d.samples) envs.push_back(s.env);
    manifest["envs"] = envs;
    const std::string mstr = manifest.dump();

    std::string out = "DGTC";
    put_u32(out, 1);
    put_u64(out, mstr.size());
    out += mstr;
    auto put_doubles = [&out](const Tensor& t) {
        for (long i = 0; i < t.size(); ++i) {
            const double v = t[i];
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            put_u64(out, bits);
        }
    };
    for (const auto& s : d.samples) {
        put_doubles(s.x_u);
        put_doubles(s.x_s);
        for (long i = 0; i < s.y.size(); ++i)
            put_u32(out, static_cast<uint32_t>(s.y[i]));
    }
    atomic_write(path, out);
}

inline Dataset load_dataset(const fs::path& path) {
    const std::string in = read_text(path);
    size_t off = 0;
    if (in.size() < 4 || in.substr(0, 4) != "DGTC")
        throw std::runtime_error("bad dataset magic in " + path.string());
    off = 4;
    const uint32_t version = get_u32(in, off);
    if (version != 1) throw std::runtime_error("unsupported dataset version");
    const uint64_t mlen = get_u64(in, off);
    if (off + mlen > in.size()) throw std::runtime_error("dataset container truncated");
    json manifest = json::parse(in.substr(off, mlen));
    off += mlen;

    Dataset d;
    d.spec_hash = manifest.at("spec_hash").get<uint64_t>();
    d.seed = manifest.at("seed").get<uint64_t>();
    d.num_classes = manifest.at("num_classes").get<int>();
    d.n_u = manifest.at("n_u").get<int>();
    d.n_s = manifest.at("n_s").get<int>();
    d.length = manifest.at("length").get<int>();
    const int count = manifest.at("count").get<int>();
    const auto envs = manifest.at("envs").get<std::vector<std::string>>();
    check(static_cast<int>(envs.size()) == count, "dataset manifest env count mismatch");

    auto get_doubles = [&](Tensor& t) {
        for (long i = 0; i < t.size(); ++i) {
            const uint64_t bits = get_u64(in, off);
            double v;
            std::memcpy(&v, &bits, sizeof(v));
            t[i] = v;
        }
    };
    for (int i = 0; i < count; ++i) {
        Sample s;
        s.env = envs[static_cast<size_t>(i)];
        s.x_u = Tensor({d.n_u, d.length});
        s.x_s = Tensor({d.n_s, d.length});
        s.y = IntTensor({d.length});
        get_doubles(s.x_u);
        get_doubles(s.x_s);
        for (long l = 0; l < s.y.size(); ++l)
            s.y[l] = static_cast<int>(get_u32(in, off));
        d.samples.push_back(std::move(s));
    }
    if (off != in.size()) throw std::runtime_error("trailing bytes in dataset container");
    return d;
}

}  // namespace dropgen
