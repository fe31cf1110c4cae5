//! Scoped flush-to-zero for the SSE unit.
//!
//! Long training runs push gradients into the subnormal range, where every
//! multiply is an order of magnitude slower. Within the guard such values are
//! read and written as zero. Other targets run `f` unchanged.

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ_DAZ: u32 = 0x8040;

    fn read() -> u32 {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr only stores the control register to the pointee.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
        csr
    }

    fn write(csr: u32) {
        // SAFETY: ldmxcsr loads a value previously read from the register
        // with at most the FTZ and DAZ bits changed.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly)) };
    }

    pub fn with<R>(f: impl FnOnce() -> R) -> R {
        struct Restore(u32);
        impl Drop for Restore {
            fn drop(&mut self) {
                write(self.0);
            }
        }
        let saved = read();
        let _restore = Restore(saved);
        write(saved | FTZ_DAZ);
        f()
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub fn with<R>(f: impl FnOnce() -> R) -> R {
        f()
    }
}

/// Runs `f` with subnormal floats flushed to zero on this thread.
pub fn flush_subnormals<R>(f: impl FnOnce() -> R) -> R {
    imp::with(f)
}
