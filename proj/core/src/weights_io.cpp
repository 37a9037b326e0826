#include "recal3d/weights_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace recal3d {

namespace {

constexpr char kMagic[4] = {'R', '3', 'D', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
    T v{};
    if (!f.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw std::runtime_error("truncated weights file '" + path + "'");
    }
    return v;
}

}  // namespace

void save_weights(const std::string& path, SegNet& net) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    auto params = net.parameters();
    f.write(kMagic, 4);
    write_pod(f, kVersion);
    write_pod(f, net.config().digest());
    write_pod(f, static_cast<std::uint32_t>(params.size()));
    for (auto& [name, t] : params) {
        write_pod(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Shape4& s = t->shape();
        for (int e : {s.c, s.h, s.w, s.d}) write_pod(f, static_cast<std::uint32_t>(e));
        f.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

void load_weights(const std::string& path, SegNet& net) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("'" + path + "' is not a weights file (bad magic)");
    }
    auto version = read_pod<std::uint32_t>(f, path);
    if (version != kVersion) {
        throw std::runtime_error("unsupported weights version " + std::to_string(version));
    }
    auto digest = read_pod<std::uint64_t>(f, path);
    if (digest != net.config().digest()) {
        throw std::runtime_error("weights digest mismatch: file was written for a different "
                                 "network configuration");
    }
    auto params = net.parameters();
    auto count = read_pod<std::uint32_t>(f, path);
    if (count != params.size()) {
        throw std::runtime_error("weights tensor count mismatch");
    }
    for (auto& [name, t] : params) {
        auto len = read_pod<std::uint32_t>(f, path);
        std::string fname(len, '\0');
        if (!f.read(fname.data(), len)) {
            throw std::runtime_error("truncated weights file '" + path + "'");
        }
        if (fname != name) {
            throw std::runtime_error("weights tensor '" + fname + "' does not match expected '" +
                                     name + "'");
        }
        Shape4 s;
        s.c = static_cast<int>(read_pod<std::uint32_t>(f, path));
        s.h = static_cast<int>(read_pod<std::uint32_t>(f, path));
        s.w = static_cast<int>(read_pod<std::uint32_t>(f, path));
        s.d = static_cast<int>(read_pod<std::uint32_t>(f, path));
        if (!(s == t->shape())) {
            throw std::runtime_error("weights tensor '" + name + "' shape mismatch");
        }
        if (!f.read(reinterpret_cast<char*>(t->data()),
                    static_cast<std::streamsize>(t->size() * sizeof(double)))) {
            throw std::runtime_error("truncated weights file '" + path + "'");
        }
    }
}

}  // namespace recal3d
