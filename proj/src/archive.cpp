#include "cvid/archive.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace cvid {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'A', 'R', '0', '0', '0', '1'};

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error("archive truncated: " + path);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void atomic_write(const std::string& path, const std::string& payload) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp);
        f.write(payload.data(), (std::streamsize)payload.size());
        if (!f) {
            f.close();
            std::remove(tmp.c_str());
            throw std::runtime_error("short write: " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw std::runtime_error("rename failed for " + path + ": " + ec.message());
    }
}

}  // namespace

void Archive::add(const std::string& name, const Tensor& t) {
    ArchiveEntry e;
    e.name = name;
    e.shape = t.shape;
    e.data.resize(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) e.data[i] = (float)t.data[i];
    entries.push_back(std::move(e));
}

const ArchiveEntry* Archive::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

Tensor Archive::tensor(const std::string& name) const {
    const ArchiveEntry* e = find(name);
    if (!e) throw std::out_of_range("archive: no entry named " + name);
    Tensor t(e->shape);
    for (size_t i = 0; i < e->data.size(); ++i) t.data[i] = (double)e->data[i];
    return t;
}

void Archive::save(const std::string& path) const {
    std::string out;
    out.append(kMagic, 8);
    put_u64(out, (uint64_t)entries.size());
    put_u64(out, meta_hash);
    for (const auto& e : entries) {
        put_u32(out, (uint32_t)e.name.size());
        out.append(e.name);
        put_u32(out, (uint32_t)e.shape.size());
        uint64_t n = 1;
        for (int64_t d : e.shape) {
            put_u32(out, (uint32_t)d);
            n *= (uint64_t)d;
        }
        if (n != e.data.size()) throw std::logic_error("archive entry shape/data mismatch");
        for (float f : e.data) put_f32(out, f);
    }
    atomic_write(path, out);
}

Archive Archive::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open archive: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf, 0, path};
    std::string magic = r.bytes(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0)
        throw std::runtime_error("not a CVAR0001 archive: " + path);
    Archive a;
    uint64_t count = r.u64();
    a.meta_hash = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        uint32_t nlen = r.u32();
        e.name = r.bytes(nlen);
        uint32_t ndim = r.u32();
        uint64_t n = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            uint32_t dim = r.u32();
            e.shape.push_back((int64_t)dim);
            n *= dim;
        }
        r.need(n * 4);
        e.data.resize(n);
        for (uint64_t j = 0; j < n; ++j) e.data[j] = r.f32();
        a.entries.push_back(std::move(e));
    }
    if (r.pos != buf.size())
        throw std::runtime_error("trailing bytes in archive: " + path);
    return a;
}

uint64_t fnv1a(const void* bytes, size_t n, uint64_t h) {
    const uint8_t* p = (const uint8_t*)bytes;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t hash_params_excluding(const ParamSet& ps, const std::set<std::string>& exclude) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& p : ps.items) {
        if (exclude.count(p->name)) continue;
        h = fnv1a(p->name.data(), p->name.size(), h);
        for (int64_t d : p->value.shape) {
            uint32_t v = (uint32_t)d;
            h = fnv1a(&v, 4, h);
        }
        for (double x : p->value.data) {
            float f = (float)x;
            uint32_t v;
            std::memcpy(&v, &f, 4);
            h = fnv1a(&v, 4, h);
        }
    }
    return h;
}

Archive make_checkpoint(const ParamSet& ps) {
    Archive a;
    std::set<std::string> saved;
    for (const auto& p : ps.items)
        if (p->trainable) {
            a.add(p->name, p->value);
            saved.insert(p->name);
        }
    a.meta_hash = hash_params_excluding(ps, saved);
    return a;
}

void load_checkpoint(ParamSet& ps, const Archive& a) {
    std::set<std::string> names;
    for (const auto& e : a.entries) {
        Param* p = ps.find(e.name);
        if (!p) throw std::runtime_error("checkpoint names unknown parameter: " + e.name);
        if (p->value.shape != e.shape)
            throw std::runtime_error("checkpoint shape mismatch for " + e.name);
        names.insert(e.name);
    }
    uint64_t h = hash_params_excluding(ps, names);
    if (h != a.meta_hash)
        throw std::runtime_error("checkpoint frozen-model hash mismatch; wrong base model");
    for (const auto& e : a.entries) {
        Param* p = ps.find(e.name);
        for (size_t i = 0; i < e.data.size(); ++i) p->value.data[i] = (double)e.data[i];
    }
}

}  // namespace cvid
