// Training allocates and frees large activation buffers every step; the
// system allocator returns them to the OS and pays page faults each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(cgz::cli::main_with_args(std::env::args_os()));
}
