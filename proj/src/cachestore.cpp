#include "kvd/cachestore.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace kvd {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

namespace {

class Writer {
public:
    template <typename T>
    void put(T v) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        out_.append(b, sizeof(T));
    }
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    std::string& str() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    [[noreturn]] void fail(const std::string& what) const { throw FormatError(path_ + ": " + what); }

private:
    void need(std::size_t n) const {
        if (remaining() < n) fail("truncated file");
    }
    std::string data_;
    std::string path_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(path, "cannot open for reading");
    std::ostringstream ss;
    ss << f.rdbuf();
    if (f.bad()) throw IoError(path, "read failed");
    return ss.str();
}

void put_section(Writer& w, const ParamMap& tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        w.bytes(t.data(), t.size() * sizeof(float));
    }
}

ParamMap get_section(Reader& r) {
    ParamMap out;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(r.get<std::uint16_t>(), '\0');
        r.bytes(name.data(), name.size());
        const auto rank = r.get<std::uint8_t>();
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = r.get<std::uint32_t>();
            n *= d;
        }
        if (n * sizeof(float) > r.remaining()) r.fail("truncated tensor '" + name + "'");
        std::vector<float> data(n);
        r.bytes(data.data(), n * sizeof(float));
        if (!out.emplace(name, Tensor(std::move(shape), std::move(data))).second)
            r.fail("duplicate tensor '" + name + "'");
    }
    return out;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError(path, "cannot open for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.flush();
        if (!f) {
            std::remove(tmp.c_str());
            throw IoError(path, "write failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw IoError(path, "rename failed: " + ec.message());
    }
}

std::size_t cache_file_size(const ModelConfig& cfg, std::size_t sinks, std::size_t k) {
    const std::size_t rows = sinks + k;
    return kCacheHeaderBytes + 4 * rows + 4 * k +
           2 * static_cast<std::size_t>(cfg.n_layers) * rows * static_cast<std::size_t>(cfg.d_model) * 4;
}

std::size_t save_cache(const CompressedCache& cache, const ModelConfig& cfg, const std::string& path) {
    const std::size_t rows = cache.rows(), d = static_cast<std::size_t>(cfg.d_model);
    if (cache.n_layers() != static_cast<std::size_t>(cfg.n_layers)) throw Error("save_cache: layer count differs from model");
    if (!cache.shared_positions()) throw Error("save_cache: per-layer positions cannot be stored");
    if (cache.scores.size() != cache.k()) throw Error("save_cache: need one score per kept row");
    for (std::size_t l = 0; l < cache.n_layers(); ++l)
        if (cache.keys[l].rows() != rows || cache.values[l].rows() != rows || cache.keys[l].cols() != d ||
            cache.values[l].cols() != d)
            throw Error("save_cache: layer " + std::to_string(l) + " has the wrong shape");

    Writer w;
    w.bytes("KVD1", 4);
    w.put<std::uint16_t>(kCacheFileVersion);
    w.put<std::uint64_t>(cfg.hash());
    w.put<std::uint16_t>(static_cast<std::uint16_t>(cfg.n_layers));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(cfg.n_heads));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(cfg.head_dim));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(cache.sink_count));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cache.k()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cache.origin_length));
    for (auto p : cache.positions.front()) w.put<std::uint32_t>(static_cast<std::uint32_t>(p));
    w.bytes(cache.scores.data(), cache.scores.size() * sizeof(float));
    for (std::size_t l = 0; l < cache.n_layers(); ++l) {
        w.bytes(cache.keys[l].data(), cache.keys[l].size() * sizeof(float));
        w.bytes(cache.values[l].data(), cache.values[l].size() * sizeof(float));
    }
    write_file_atomic(path, w.str());
    return w.str().size();
}

CompressedCache load_cache(const std::string& path, const ModelConfig& cfg) {
    Reader r(read_file(path), path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "KVD1", 4) != 0) r.fail("not a cache file (bad magic)");
    if (const auto v = r.get<std::uint16_t>(); v != kCacheFileVersion)
        r.fail("unsupported cache version " + std::to_string(v));
    if (r.get<std::uint64_t>() != cfg.hash()) r.fail("cache was written for a different model configuration");
    const auto layers = r.get<std::uint16_t>(), heads = r.get<std::uint16_t>(), hd = r.get<std::uint16_t>();
    if (layers != cfg.n_layers || heads != cfg.n_heads || hd != cfg.head_dim)
        r.fail("cache dimensions do not match the model");
    CompressedCache c;
    c.sink_count = r.get<std::uint16_t>();
    const std::size_t k = r.get<std::uint32_t>();
    c.origin_length = r.get<std::uint32_t>();
    const std::size_t rows = c.sink_count + k, d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t expect = 4 * rows + 4 * k + 2 * layers * rows * d * 4;
    if (r.remaining() != expect)
        r.fail("payload is " + std::to_string(r.remaining()) + " bytes, header declares " + std::to_string(expect));
    std::vector<std::int32_t> pos(rows);
    for (auto& p : pos) p = static_cast<std::int32_t>(r.get<std::uint32_t>());
    for (std::size_t i = 0; i < rows; ++i)
        if ((i > 0 && pos[i] <= pos[i - 1]) || pos[i] >= static_cast<std::int32_t>(c.origin_length))
            r.fail("positions are not increasing within the original length");
    c.scores.resize(k);
    r.bytes(c.scores.data(), k * sizeof(float));
    for (std::size_t l = 0; l < layers; ++l) {
        Tensor kt({rows, d}), vt({rows, d});
        r.bytes(kt.data(), kt.size() * sizeof(float));
        r.bytes(vt.data(), vt.size() * sizeof(float));
        c.keys.push_back(std::move(kt));
        c.values.push_back(std::move(vt));
        c.positions.push_back(pos);
    }
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    Writer w;
    w.bytes("KVDC", 4);
    w.put<std::uint16_t>(kCheckpointVersion);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ckpt.kind));
    w.put<std::uint64_t>(ckpt.config_hash);
    w.put<std::int64_t>(ckpt.step);
    put_section(w, ckpt.tensors);
    put_section(w, ckpt.optimizer);
    write_file_atomic(path, w.str());
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(read_file(path), path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "KVDC", 4) != 0) r.fail("not a checkpoint (bad magic)");
    if (const auto v = r.get<std::uint16_t>(); v != kCheckpointVersion)
        r.fail("unsupported checkpoint version " + std::to_string(v));
    Checkpoint c;
    const auto kind = r.get<std::uint8_t>();
    if (kind != static_cast<std::uint8_t>(CheckpointKind::Base) && kind != static_cast<std::uint8_t>(CheckpointKind::Adapter))
        r.fail("unknown checkpoint kind " + std::to_string(kind));
    c.kind = static_cast<CheckpointKind>(kind);
    c.config_hash = r.get<std::uint64_t>();
    c.step = r.get<std::int64_t>();
    c.tensors = get_section(r);
    c.optimizer = get_section(r);
    if (r.remaining() != 0) r.fail("trailing bytes after checkpoint");
    return c;
}

namespace {

void check_names(const ParamMap& expected, const ParamMap& got, const std::string& path) {
    for (const auto& [name, t] : expected) {
        auto it = got.find(name);
        if (it == got.end()) throw FormatError(path + ": missing tensor '" + name + "'");
        if (it->second.shape() != t.shape())
            throw FormatError(path + ": tensor '" + name + "' has shape " + it->second.shape_str() + ", expected " +
                              t.shape_str());
    }
    if (got.size() != expected.size()) throw FormatError(path + ": unexpected extra tensors");
}

Checkpoint load_kind(const std::string& path, const ModelConfig& cfg, CheckpointKind kind) {
    Checkpoint c = load_checkpoint(path);
    if (c.kind != kind)
        throw FormatError(path + (kind == CheckpointKind::Base ? ": not a base checkpoint" : ": not an adapter checkpoint"));
    if (c.config_hash != cfg.hash()) throw FormatError(path + ": checkpoint was written for a different model configuration");
    return c;
}

}  // namespace

void save_base(const BaseParams& params, const std::string& path) {
    save_checkpoint({CheckpointKind::Base, params.config.hash(), 0, params.tensors, {}}, path);
}

BaseParams load_base(const std::string& path, const ModelConfig& cfg) {
    Checkpoint c = load_kind(path, cfg, CheckpointKind::Base);
    BaseParams p;
    p.config = cfg;
    check_names(BaseParams::init(cfg, 0).tensors, c.tensors, path);
    p.tensors = std::move(c.tensors);
    return p;
}

void save_adapters(const AdapterSet& adapters, const std::string& path) {
    save_checkpoint({CheckpointKind::Adapter, adapters.config.hash(), 0, adapters.tensors, {}}, path);
}

AdapterSet load_adapters(const std::string& path, const ModelConfig& cfg) {
    Checkpoint c = load_kind(path, cfg, CheckpointKind::Adapter);
    AdapterSet a = AdapterSet::zeros(cfg);
    check_names(a.tensors, c.tensors, path);
    a.tensors = std::move(c.tensors);
    return a;
}

}  // namespace kvd
