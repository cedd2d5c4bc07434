#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace ttlab {

// Compact float formatting shared by every CSV/JSON writer so reruns stay
// byte-identical.
inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void atomic_write_text(const std::string& path, const std::string& contents) {
  std::string tmp = path + ".tmp";
  {
    FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    size_t n = std::fwrite(contents.data(), 1, contents.size(), f);
    bool ok = (n == contents.size()) && std::fclose(f) == 0;
    if (!ok) throw std::runtime_error("write to " + tmp + " failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("rename " + tmp + " -> " + path + " failed");
}

}  // namespace ttlab
