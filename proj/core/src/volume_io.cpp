#include "recal3d/volume_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "volume files are little-endian; big-endian hosts are unsupported");

namespace recal3d {

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '3'};
constexpr std::uint32_t kVersion = 1;

[[noreturn]] void format_error(const std::string& what, std::size_t offset) {
    throw std::runtime_error("volume format error at byte " + std::to_string(offset) + ": " +
                             what);
}

void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::ifstream& f, std::size_t& off) {
    std::uint32_t v = 0;
    if (!f.read(reinterpret_cast<char*>(&v), 4)) format_error("truncated", off);
    off += 4;
    return v;
}

std::uint8_t read_u8(std::ifstream& f, std::size_t& off) {
    char c = 0;
    if (!f.read(&c, 1)) format_error("truncated", off);
    off += 1;
    return static_cast<std::uint8_t>(c);
}

void write_header(std::ofstream& f, std::uint8_t dtype, Shape4 shape) {
    f.write(kMagic, 4);
    write_u32(f, kVersion);
    f.put(static_cast<char>(dtype));
    f.put(4);  // rank
    write_u32(f, static_cast<std::uint32_t>(shape.c));
    write_u32(f, static_cast<std::uint32_t>(shape.h));
    write_u32(f, static_cast<std::uint32_t>(shape.w));
    write_u32(f, static_cast<std::uint32_t>(shape.d));
}

}  // namespace

void save_volume(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_header(f, 0, t.shape());
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

void save_volume(const std::string& path, const LabelVolume& l) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_header(f, 1, {1, l.h, l.w, l.d});
    f.write(reinterpret_cast<const char*>(l.values.data()),
            static_cast<std::streamsize>(l.values.size()));
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

VolumeFile load_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::size_t off = 0;
    char magic[4];
    if (!f.read(magic, 4)) format_error("truncated magic", off);
    if (std::memcmp(magic, kMagic, 4) != 0) format_error("bad magic", 0);
    off = 4;
    std::uint32_t version = read_u32(f, off);
    if (version != kVersion) format_error("unsupported version " + std::to_string(version), 4);
    std::uint8_t dtype = read_u8(f, off);
    if (dtype > 1) format_error("unknown dtype " + std::to_string(dtype), off - 1);
    std::uint8_t rank = read_u8(f, off);
    if (rank != 4) format_error("rank must be 4", off - 1);
    Shape4 shape;
    shape.c = static_cast<int>(read_u32(f, off));
    shape.h = static_cast<int>(read_u32(f, off));
    shape.w = static_cast<int>(read_u32(f, off));
    shape.d = static_cast<int>(read_u32(f, off));
    if (shape.c < 1 || shape.h < 1 || shape.w < 1 || shape.d < 1) {
        format_error("non-positive extent", off - 16);
    }

    VolumeFile out;
    if (dtype == 0) {
        std::vector<double> data(shape.count());
        if (!f.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(data.size() * sizeof(double)))) {
            format_error("truncated payload", off);
        }
        out.real = Tensor::from_data(shape, std::move(data));
    } else {
        if (shape.c != 1) format_error("label volumes must have C=1", off - 16);
        out.is_labels = true;
        out.labels = LabelVolume::filled(shape.h, shape.w, shape.d);
        if (!f.read(reinterpret_cast<char*>(out.labels.values.data()),
                    static_cast<std::streamsize>(out.labels.values.size()))) {
            format_error("truncated payload", off);
        }
    }
    // A conforming file ends exactly after the payload.
    f.peek();
    if (!f.eof()) {
        format_error("trailing bytes",
                     off + (dtype == 0 ? shape.count() * sizeof(double) : shape.count()));
    }
    return out;
}

}  // namespace recal3d
