#pragma once

// Volume and mask persistence, dataset manifests, and montage export.
//
// On-disk volume: <stem>.json header
//   {"dims":[D,H,W],"spacing":[sd,sh,sw],"dtype":"int16"|"uint8"|"float32"|"float64","version":1}
// plus <stem>.raw, little-endian, D-major then H then W.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace dram {

namespace fs = std::filesystem;

using Dims3 = std::array<std::int64_t, 3>;
using Spacing3 = std::array<double, 3>;

class VolioError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};
class HeaderError : public VolioError {
   public:
    using VolioError::VolioError;
};
class PayloadSizeError : public VolioError {
   public:
    using VolioError::VolioError;
};
class VersionError : public VolioError {
   public:
    using VolioError::VolioError;
};
class ManifestError : public VolioError {
   public:
    ManifestError(std::size_t line, const std::string& what)
        : VolioError("manifest line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

   private:
    std::size_t line_;
};

// Dense scalar field on a regular grid.
template <typename T>
struct Grid {
    Dims3 dims{};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<T> values;

    Grid() = default;
    Grid(Dims3 d, Spacing3 s, T fill = T{}) : dims(d), spacing(s) {
        validate_shape();
        values.assign(static_cast<std::size_t>(voxels()), fill);
    }
    Grid(Dims3 d, Spacing3 s, std::vector<T> v) : dims(d), spacing(s), values(std::move(v)) { validate(); }

    std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return static_cast<std::size_t>((z * dims[1] + y) * dims[2] + x);
    }
    T& at(std::int64_t z, std::int64_t y, std::int64_t x) { return values[index(z, y, x)]; }
    const T& at(std::int64_t z, std::int64_t y, std::int64_t x) const { return values[index(z, y, x)]; }

    void validate_shape() const {
        for (auto e : dims)
            if (e <= 0) throw std::invalid_argument("grid extents must be positive");
        for (auto s : spacing)
            if (!(s > 0) || !std::isfinite(s)) throw std::invalid_argument("grid spacing must be positive");
    }
    void validate() const {
        validate_shape();
        if (static_cast<std::int64_t>(values.size()) != voxels())
            throw std::invalid_argument("grid value count " + std::to_string(values.size()) + " != D*H*W " +
                                        std::to_string(voxels()));
    }
    bool operator==(const Grid&) const = default;
};

using Volume = Grid<std::int16_t>;  // Hounsfield-like units
using Mask = Grid<std::uint8_t>;    // values in {0,1}
using RealField = Grid<double>;

inline void require_binary(const Mask& m) {
    for (auto v : m.values)
        if (v > 1) throw std::invalid_argument("mask is not binary");
}

inline void require_aligned(const Dims3& a, const Dims3& b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": extents are not aligned");
}

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, std::int16_t>) return "int16";
    else if constexpr (std::is_same_v<T, std::uint8_t>) return "uint8";
    else if constexpr (std::is_same_v<T, float>) return "float32";
    else if constexpr (std::is_same_v<T, double>) return "float64";
    else static_assert(sizeof(T) == 0, "unsupported voxel type");
}

template <typename T>
void to_little_endian_bytes(const std::vector<T>& v, std::vector<char>& out) {
    out.resize(v.size() * sizeof(T));
    std::memcpy(out.data(), v.data(), out.size());
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
        for (std::size_t i = 0; i < v.size(); ++i) std::reverse(out.begin() + i * sizeof(T), out.begin() + (i + 1) * sizeof(T));
}

template <typename T>
void from_little_endian_bytes(std::vector<char>& bytes, std::vector<T>& out) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
        for (std::size_t i = 0; i < bytes.size() / sizeof(T); ++i)
            std::reverse(bytes.begin() + i * sizeof(T), bytes.begin() + (i + 1) * sizeof(T));
    out.resize(bytes.size() / sizeof(T));
    std::memcpy(out.data(), bytes.data(), bytes.size());
}

}  // namespace detail

// Accepts "<stem>", "<stem>.json" or "<stem>.raw".
inline fs::path volume_stem(const fs::path& p) {
    const auto ext = p.extension().string();
    if (ext == ".json" || ext == ".raw") return p.parent_path() / p.stem();
    return p;
}
inline fs::path header_path(const fs::path& p) { return fs::path(volume_stem(p).string() + ".json"); }
inline fs::path payload_path(const fs::path& p) { return fs::path(volume_stem(p).string() + ".raw"); }

template <typename T>
void write_grid(const Grid<T>& g, const fs::path& path) {
    g.validate();
    const auto stem = volume_stem(path);
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    nlohmann::json h{{"dims", g.dims}, {"spacing", g.spacing}, {"dtype", detail::dtype_name<T>()}, {"version", 1}};
    {
        std::ofstream out(header_path(stem));
        if (!out) throw VolioError("cannot write " + header_path(stem).string());
        out << h.dump() << '\n';
    }
    std::vector<char> bytes;
    detail::to_little_endian_bytes(g.values, bytes);
    std::ofstream out(payload_path(stem), std::ios::binary);
    if (!out) throw VolioError("cannot write " + payload_path(stem).string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct GridHeader {
    Dims3 dims;
    Spacing3 spacing;
    std::string dtype;
};

inline GridHeader read_grid_header(const fs::path& path) {
    const auto hp = header_path(path);
    std::ifstream in(hp);
    if (!in) throw VolioError("cannot open " + hp.string());
    nlohmann::json h;
    try {
        in >> h;
    } catch (const nlohmann::json::exception& e) {
        throw HeaderError(hp.string() + ": malformed header: " + e.what());
    }
    if (!h.is_object() || !h.contains("version")) throw HeaderError(hp.string() + ": header lacks a version");
    if (!h["version"].is_number_integer()) throw HeaderError(hp.string() + ": version must be an integer");
    if (h["version"].get<int>() != 1)
        throw VersionError(hp.string() + ": unsupported version " + h["version"].dump());
    GridHeader out;
    try {
        out.dims = h.at("dims").get<Dims3>();
        out.spacing = h.at("spacing").get<Spacing3>();
        out.dtype = h.at("dtype").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw HeaderError(hp.string() + ": malformed header: " + e.what());
    }
    for (auto d : out.dims)
        if (d <= 0) throw HeaderError(hp.string() + ": extents must be positive");
    for (auto s : out.spacing)
        if (!(s > 0)) throw HeaderError(hp.string() + ": spacing must be positive");
    return out;
}

template <typename T>
Grid<T> read_grid(const fs::path& path) {
    const auto h = read_grid_header(path);
    if (h.dtype != detail::dtype_name<T>())
        throw HeaderError(header_path(path).string() + ": dtype " + h.dtype + ", expected " + detail::dtype_name<T>());
    const auto pp = payload_path(path);
    std::ifstream in(pp, std::ios::binary | std::ios::ate);
    if (!in) throw VolioError("cannot open " + pp.string());
    const auto size = static_cast<std::uint64_t>(in.tellg());
    const auto expected = static_cast<std::uint64_t>(h.dims[0] * h.dims[1] * h.dims[2]) * sizeof(T);
    if (size != expected)
        throw PayloadSizeError(pp.string() + ": payload has " + std::to_string(size) + " bytes, header declares " +
                               std::to_string(expected));
    in.seekg(0);
    std::vector<char> bytes(size);
    in.read(bytes.data(), static_cast<std::streamsize>(size));
    Grid<T> g;
    g.dims = h.dims;
    g.spacing = h.spacing;
    detail::from_little_endian_bytes(bytes, g.values);
    return g;
}

inline Volume read_volume(const fs::path& path) { return read_grid<std::int16_t>(path); }
inline void write_volume(const Volume& v, const fs::path& path) { write_grid(v, path); }

inline Mask read_mask(const fs::path& path) {
    auto m = read_grid<std::uint8_t>(path);
    require_binary(m);
    return m;
}
inline void write_mask(const Mask& m, const fs::path& path) {
    require_binary(m);
    write_grid(m, path);
}

// ---------------------------------------------------------------------------
// Manifests

enum class Split { train, valid, eval };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::eval: return "eval";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "valid") return Split::valid;
    if (s == "eval") return Split::eval;
    throw std::invalid_argument("unknown split '" + s + "'");
}

struct ManifestRow {
    std::string id;
    fs::path volume;  // raw manifests: HU volume; preprocessed manifests: network image
    fs::path mask;
    fs::path laa;     // preprocessed manifests only
    int cle_score = 0;
    int pse_score = 0;
    Split split = Split::train;
};

struct Manifest {
    bool preprocessed = false;
    std::vector<ManifestRow> rows;

    std::vector<ManifestRow> select(Split s) const {
        std::vector<ManifestRow> out;
        for (const auto& r : rows)
            if (r.split == s) out.push_back(r);
        return out;
    }
};

inline const std::string kManifestHeader = "id,volume,mask,cle_score,pse_score,split";
inline const std::string kPreprocessedHeader = "id,image,mask,laa,cle_score,pse_score,split";

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline int parse_score(const std::string& s, int max, std::size_t line, const char* what) {
    int v = 0;
    std::size_t used = 0;
    try {
        v = std::stoi(s, &used);
    } catch (const std::exception&) {
        throw ManifestError(line, std::string(what) + " '" + s + "' is not an integer");
    }
    if (used != s.size()) throw ManifestError(line, std::string(what) + " '" + s + "' is not an integer");
    if (v < 0 || v > max)
        throw ManifestError(line, std::string(what) + " " + s + " outside 0.." + std::to_string(max));
    return v;
}

}  // namespace detail

// Paths in the manifest are resolved relative to the manifest's directory.
// `check_files` verifies that every referenced grid exists.
inline Manifest read_manifest(const fs::path& path, bool check_files = true) {
    std::ifstream in(path);
    if (!in) throw VolioError("cannot open manifest " + path.string());
    Manifest m;
    std::string line;
    std::size_t lineno = 0;
    std::set<std::string> ids;
    const auto base = path.parent_path();
    std::size_t columns = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (columns == 0) {
            if (line == kManifestHeader) {
                columns = 6;
            } else if (line == kPreprocessedHeader) {
                columns = 7;
                m.preprocessed = true;
            } else {
                throw ManifestError(lineno, "unexpected header '" + line + "'");
            }
            continue;
        }
        const auto cells = detail::split_csv(line);
        if (cells.size() != columns)
            throw ManifestError(lineno, "expected " + std::to_string(columns) + " fields, got " +
                                            std::to_string(cells.size()));
        ManifestRow r;
        std::size_t c = 0;
        r.id = cells[c++];
        if (r.id.empty()) throw ManifestError(lineno, "empty id");
        if (!ids.insert(r.id).second) throw ManifestError(lineno, "duplicate id '" + r.id + "'");
        r.volume = base / cells[c++];
        r.mask = base / cells[c++];
        if (m.preprocessed) r.laa = base / cells[c++];
        r.cle_score = detail::parse_score(cells[c++], 5, lineno, "cle_score");
        r.pse_score = detail::parse_score(cells[c++], 2, lineno, "pse_score");
        try {
            r.split = parse_split(cells[c++]);
        } catch (const std::invalid_argument& e) {
            throw ManifestError(lineno, e.what());
        }
        if (check_files) {
            std::vector<fs::path> files{r.volume, r.mask};
            if (m.preprocessed) files.push_back(r.laa);
            for (const auto& f : files)
                if (!fs::exists(header_path(f)) || !fs::exists(payload_path(f)))
                    throw ManifestError(lineno, "missing file " + volume_stem(f).string() + "{.json,.raw}");
        }
        m.rows.push_back(std::move(r));
    }
    return m;
}

// Writes paths relative to the manifest's directory when possible.
inline void write_manifest(const Manifest& m, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw VolioError("cannot write manifest " + path.string());
    const auto base = path.parent_path();
    auto rel = [&](const fs::path& p) { return base.empty() ? p.generic_string() : p.lexically_relative(base).generic_string(); };
    out << (m.preprocessed ? kPreprocessedHeader : kManifestHeader) << '\n';
    for (const auto& r : m.rows) {
        out << r.id << ',' << rel(r.volume) << ',' << rel(r.mask) << ',';
        if (m.preprocessed) out << rel(r.laa) << ',';
        out << r.cle_score << ',' << r.pse_score << ',' << to_string(r.split) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Montage export

// Tiles the selected axial (depth) slices left to right as an 8-bit binary
// PGM; pixel = round(v * 255).
inline void export_montage(const RealField& map, const std::vector<std::int64_t>& slices, const fs::path& path) {
    map.validate();
    if (slices.empty()) throw std::invalid_argument("export_montage: no slices selected");
    for (auto s : slices)
        if (s < 0 || s >= map.dims[0])
            throw std::out_of_range("export_montage: slice " + std::to_string(s) + " outside 0.." +
                                    std::to_string(map.dims[0] - 1));
    for (double v : map.values)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("export_montage: values must lie in [0,1]");
    const auto h = map.dims[1], w = map.dims[2];
    const auto width = w * static_cast<std::int64_t>(slices.size());
    std::vector<unsigned char> pixels(static_cast<std::size_t>(width * h));
    for (std::size_t t = 0; t < slices.size(); ++t)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                pixels[static_cast<std::size_t>(y * width + static_cast<std::int64_t>(t) * w + x)] =
                    static_cast<unsigned char>(std::lround(map.at(slices[t], y, x) * 255.0));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw VolioError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace dram
