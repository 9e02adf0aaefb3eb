// Independent accounting model for a scripted decode.  Works straight off the
// response structure: per stage, branch b contributes a forced prefix (open
// marker plus "Title: "), a sampled body, and a sampled close marker; a decode
// step is sampled whenever at least one branch samples at that lockstep
// offset.  Used to predict engine counters without touching engine code.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "aspd/corpus.hpp"
#include "aspd/tokenizer.hpp"

namespace testsupport {

struct SimCounts {
  int response_tokens = 0;
  int serial_tokens = 0;
  int parallel_tokens = 0;
  int sampled_tokens = 0;
  int forced_tokens = 0;
  int sampled_steps = 0;
};

inline SimCounts simulate_scripted(const aspd::StructuredResponse& response,
                                   const aspd::ByteTokenizer& tokenizer) {
  SimCounts c;
  auto add_serial_sampled = [&c](int n) {
    c.response_tokens += n;
    c.serial_tokens += n;
    c.sampled_tokens += n;
    c.sampled_steps += n;
  };

  for (const aspd::ResponseSegment& seg : response.segments) {
    if (seg.kind == aspd::ResponseSegment::Kind::Serial) {
      add_serial_sampled(static_cast<int>(tokenizer.encode(seg.text).size()));
      continue;
    }
    const aspd::ParallelGroup& group = seg.group;
    for (const std::string& title : group.titles) {
      add_serial_sampled(2 + static_cast<int>(tokenizer.encode(title).size()));
    }
    add_serial_sampled(1);  // group open marker

    std::vector<int> prefix_rows;
    std::vector<int> total_rows;
    for (std::size_t b = 0; b < group.branches.size(); ++b) {
      const std::string& branch = group.branches[b];
      std::string prefix = group.titles[b] + ": ";
      int prefix_len =
          1 + static_cast<int>(tokenizer.encode(prefix).size());
      int body_len = static_cast<int>(
          tokenizer.encode(branch.substr(prefix.size())).size());
      int rows = prefix_len + body_len + 1;  // prefix, body, close marker
      prefix_rows.push_back(prefix_len);
      total_rows.push_back(rows);
      c.response_tokens += rows;
      c.parallel_tokens += rows;
      c.forced_tokens += prefix_len;
      c.sampled_tokens += body_len + 1;
    }
    int longest = *std::max_element(total_rows.begin(), total_rows.end());
    for (int offset = 0; offset < longest; ++offset) {
      bool sampled = false;
      for (std::size_t b = 0; b < total_rows.size(); ++b) {
        sampled = sampled || (offset >= prefix_rows[b] &&
                              offset < total_rows[b]);
      }
      if (sampled) {
        ++c.sampled_steps;
      }
    }

    c.response_tokens += 1;  // forced group close marker
    c.serial_tokens += 1;
    c.forced_tokens += 1;
  }

  add_serial_sampled(1);  // end-of-sequence token
  return c;
}

}  // namespace testsupport
