#pragma once

// Binary (P5) PGM read/write. Samples are big-endian when maxval > 255,
// as in netpbm. Row-major, top row first.

#include <Eigen/Dense>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "covt/errors.hpp"

namespace covt {

inline void write_pgm(const std::string& path, const Eigen::MatrixXd& img,
                      int maxval) {
  if (maxval < 1 || maxval > 65535) throw InvalidValue("pgm maxval");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoFailure("cannot write " + path);
  out << "P5\n" << img.cols() << " " << img.rows() << "\n" << maxval << "\n";
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    for (Eigen::Index c = 0; c < img.cols(); ++c) {
      double v = img(r, c);
      long q = std::lround(v);
      if (q < 0) q = 0;
      if (q > maxval) q = maxval;
      if (maxval > 255) {
        unsigned char hi = static_cast<unsigned char>((q >> 8) & 0xff);
        unsigned char lo = static_cast<unsigned char>(q & 0xff);
        out.put(static_cast<char>(hi));
        out.put(static_cast<char>(lo));
      } else {
        out.put(static_cast<char>(q & 0xff));
      }
    }
  }
  if (!out) throw IoFailure("write failed for " + path);
}

struct PgmImage {
  int maxval = 0;
  Eigen::MatrixXd values;  // raw integer sample values
};

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot read " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoFailure(path + ": not a binary PGM");
  auto next_int = [&in, &path]() {
    // skip whitespace and '#' comments
    for (;;) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw IoFailure(path + ": bad PGM header");
    return v;
  };
  long w = next_int();
  long h = next_int();
  long maxval = next_int();
  in.get();  // single whitespace after maxval
  PgmImage img;
  img.maxval = static_cast<int>(maxval);
  img.values.resize(h, w);
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      int b0 = in.get();
      if (b0 < 0) throw IoFailure(path + ": truncated PGM");
      long v = b0;
      if (maxval > 255) {
        int b1 = in.get();
        if (b1 < 0) throw IoFailure(path + ": truncated PGM");
        v = (v << 8) | b1;
      }
      img.values(r, c) = static_cast<double>(v);
    }
  }
  return img;
}

}  // namespace covt
