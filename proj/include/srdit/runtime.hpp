#pragma once

namespace srdit {

/// Keeps freed activation buffers on the heap instead of returning them to
/// the OS after every step. Idempotent.
void configure_allocator();

}  // namespace srdit
