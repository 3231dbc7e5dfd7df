#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "cvid/autodiff.hpp"
#include "cvid/tensor.hpp"

namespace cvid {

// Binary container for named float32 arrays, used for both checkpoints and
// attention stores.
//
// Layout (all integers little-endian):
//   8 bytes  magic "CVAR0001"
//   u64      entry count
//   u64      meta hash (checkpoint: hash of the params NOT in the file)
//   entries: u32 name length, name bytes,
//            u32 ndim, u32 dims[ndim],
//            f32 data[prod(dims)]
struct ArchiveEntry {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;
};

struct Archive {
    uint64_t meta_hash = 0;
    std::vector<ArchiveEntry> entries;

    void add(const std::string& name, const Tensor& t);
    const ArchiveEntry* find(const std::string& name) const;
    bool has(const std::string& name) const { return find(name) != nullptr; }
    Tensor tensor(const std::string& name) const;  // throws if missing

    void save(const std::string& path) const;  // write-to-temp then rename
    static Archive load(const std::string& path);
};

uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 14695981039346656037ull);

// Hash of every param whose name is not excluded: name bytes, dims, and the
// float32 image of the values, in registration order.
uint64_t hash_params_excluding(const ParamSet& ps, const std::set<std::string>& exclude);

// Trainable params as entries; meta_hash covers the rest of the model.
Archive make_checkpoint(const ParamSet& ps);

// Copies entries into same-named params after verifying shapes and that the
// untouched remainder of the model matches the stored hash.
void load_checkpoint(ParamSet& ps, const Archive& a);

}  // namespace cvid
