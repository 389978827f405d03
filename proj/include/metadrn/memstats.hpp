#pragma once

#include <atomic>
#include <cstddef>

namespace metadrn {

// Global accounting of live tensor buffer bytes. Used to compare the memory
// high-water mark of first- vs second-order meta-gradient paths.
struct MemStats {
  static std::atomic<size_t>& live() {
    static std::atomic<size_t> v{0};
    return v;
  }
  static std::atomic<size_t>& peak() {
    static std::atomic<size_t> v{0};
    return v;
  }

  static void add(size_t bytes) {
    size_t now = live().fetch_add(bytes) + bytes;
    size_t p = peak().load();
    while (now > p && !peak().compare_exchange_weak(p, now)) {
    }
  }

  static void sub(size_t bytes) { live().fetch_sub(bytes); }

  static void reset_peak() { peak().store(live().load()); }
};

}  // namespace metadrn
