#include "tdpo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace tdpo::ad {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'P', 'R'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kVersion);
    write_pod<std::uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) write_pod<std::uint64_t>(os, d);
        if (t.dtype == Dtype::f64) {
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        } else {
            for (double v : t.data) write_pod<float>(os, static_cast<float>(v));
        }
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t version = read_pod<std::uint32_t>(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    std::uint64_t count = read_pod<std::uint64_t>(is);
    std::map<std::string, Tensor> out;
    for (std::uint64_t r = 0; r < count; ++r) {
        std::uint32_t name_len = read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        std::uint8_t dtype_tag = read_pod<std::uint8_t>(is);
        if (dtype_tag > 1) throw std::runtime_error("checkpoint: bad dtype tag");
        std::uint32_t ndim = read_pod<std::uint32_t>(is);
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(is));
        Tensor t = Tensor::zeros(shape, static_cast<Dtype>(dtype_tag));
        if (t.dtype == Dtype::f64) {
            is.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (!is) throw std::runtime_error("checkpoint: truncated data record");
        } else {
            for (double& v : t.data) v = static_cast<double>(read_pod<float>(is));
        }
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

std::uint64_t content_hash(const Tensor& t) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (std::size_t d : t.shape) {
        std::uint64_t v = d;
        mix(reinterpret_cast<const unsigned char*>(&v), sizeof(v));
    }
    mix(reinterpret_cast<const unsigned char*>(t.data.data()), t.data.size() * sizeof(double));
    return h;
}

std::uint64_t content_hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("content_hash_file: cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    return h;
}

}  // namespace tdpo::ad
