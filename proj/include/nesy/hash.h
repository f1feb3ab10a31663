#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace nesy {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
	for (unsigned char c : bytes) {
		h ^= c;
		h *= 0x100000001b3ull;
	}
	return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
	x += 0x9e3779b97f4a7c15ull;
	x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
	x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
	return x ^ (x >> 31);
}

/// Derives an independent stream seed from a parent seed and a path of
/// indices, e.g. (master, generation, offspring).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
	std::uint64_t h = splitmix64(seed);
	for (std::uint64_t p : path) h = splitmix64(h ^ splitmix64(p + 0x51ed270b27a4b1c5ull));
	return h;
}

} // namespace nesy
