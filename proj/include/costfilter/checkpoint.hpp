#pragma once
// Versioned binary checkpoint: config echo, named weight arrays, optimizer
// moments, scheduler state, epoch/step counters, and the RNG state, so
// training resumes bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "costfilter/errors.hpp"
#include "costfilter/nn.hpp"
#include "costfilter/optim.hpp"

namespace costfilter {

inline constexpr char kCkptMagic[8] = {'C', 'F', 'A', 'D', 'C', 'K', 'P', '1'};

template <class T>
struct Checkpoint {
    std::string config_echo;
    std::uint32_t epoch = 0;
    std::uint64_t global_step = 0;
    double lr = 0;
    double scheduler_best = -1;
    std::int32_t scheduler_bad_epochs = 0;
    std::string rng_state;
    std::vector<std::pair<std::string, Tensor<T>>> weights;
    std::vector<Tensor<T>> adam_m, adam_v;
    std::uint64_t adam_steps = 0;
};

namespace ckpt_detail {

inline void write_u32(std::ofstream& f, std::uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ofstream& f, std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_f64(std::ofstream& f, double v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_str(std::ofstream& f, const std::string& s) {
    write_u64(f, s.size());
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t read_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline double read_f64(std::ifstream& f) {
    double v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::string read_str(std::ifstream& f) {
    std::uint64_t n = read_u64(f);
    std::string s(n, '\0');
    f.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

template <class T>
void write_tensor(std::ofstream& f, const Tensor<T>& t) {
    write_u32(f, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d = 0; d < t.ndim(); ++d) write_u64(f, t.dim(d));
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <class T>
Tensor<T> read_tensor(std::ifstream& f) {
    std::uint32_t nd = read_u32(f);
    Shape s(nd);
    for (auto& d : s) d = read_u64(f);
    Tensor<T> t(s);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
    return t;
}

}  // namespace ckpt_detail

template <class T>
void save_checkpoint(const Checkpoint<T>& c, const std::string& path) {
    using namespace ckpt_detail;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f.write(kCkptMagic, 8);
    write_u32(f, 1);  // version
    write_u32(f, static_cast<std::uint32_t>(sizeof(T)));
    write_str(f, c.config_echo);
    write_u32(f, c.epoch);
    write_u64(f, c.global_step);
    write_f64(f, c.lr);
    write_f64(f, c.scheduler_best);
    write_u32(f, static_cast<std::uint32_t>(c.scheduler_bad_epochs));
    write_str(f, c.rng_state);
    write_u64(f, c.weights.size());
    for (auto& [name, t] : c.weights) {
        write_str(f, name);
        write_tensor(f, t);
    }
    write_u64(f, c.adam_m.size());
    for (auto& t : c.adam_m) write_tensor(f, t);
    for (auto& t : c.adam_v) write_tensor(f, t);
    write_u64(f, c.adam_steps);
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("load_checkpoint: bad magic in " + path);
    if (read_u32(f) != 1) throw IoError("load_checkpoint: unsupported version");
    if (read_u32(f) != sizeof(T)) throw IoError("load_checkpoint: scalar width mismatch");
    Checkpoint<T> c;
    c.config_echo = read_str(f);
    c.epoch = read_u32(f);
    c.global_step = read_u64(f);
    c.lr = read_f64(f);
    c.scheduler_best = read_f64(f);
    c.scheduler_bad_epochs = static_cast<std::int32_t>(read_u32(f));
    c.rng_state = read_str(f);
    std::uint64_t nw = read_u64(f);
    for (std::uint64_t i = 0; i < nw; ++i) {
        std::string name = read_str(f);
        c.weights.emplace_back(name, read_tensor<T>(f));
    }
    std::uint64_t nm = read_u64(f);
    for (std::uint64_t i = 0; i < nm; ++i) c.adam_m.push_back(read_tensor<T>(f));
    for (std::uint64_t i = 0; i < nm; ++i) c.adam_v.push_back(read_tensor<T>(f));
    c.adam_steps = read_u64(f);
    if (!f) throw IoError("load_checkpoint: truncated file " + path);
    return c;
}

// Copy checkpoint weights into a parameter store (names must match).
template <class T>
void restore_params(const Checkpoint<T>& c, nn::ParamStore<T>& params) {
    if (c.weights.size() != params.items().size())
        throw IoError("restore_params: parameter count mismatch");
    for (auto& [name, t] : c.weights) {
        auto v = params.find(name);
        if (!v.value().same_shape(t)) throw IoError("restore_params: shape mismatch for " + name);
        v.value() = t;
    }
}

template <class T>
void capture_params(Checkpoint<T>& c, const nn::ParamStore<T>& params) {
    c.weights.clear();
    for (auto& [name, v] : params.items()) c.weights.emplace_back(name, v.value());
}

}  // namespace costfilter
