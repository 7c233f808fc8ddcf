//! Allocator tuning for tape-heavy workloads.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keeps freed memory in the process heap instead of returning it to the
/// OS after every forward/backward pass. Affects only glibc targets; called
/// by the training and sampling entry points, safe to call repeatedly.
pub fn retain_heap() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 512 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        }
    });
}
