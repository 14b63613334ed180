#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace trojanscope {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag)
{
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

// Every random stream in the pipeline is derived from one master seed through
// a (tag, counter...) path, so jobs can run in any order.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::initializer_list<std::uint64_t> counters = {})
{
    std::uint64_t s = splitmix64(master ^ hash_tag(tag));
    for (std::uint64_t c : counters)
        s = splitmix64(s ^ splitmix64(c + 0x632be59bd9b4e019ull));
    return s;
}

}  // namespace trojanscope
