fn main() {
    std::process::exit(rss_lab::cli::dispatch(std::env::args_os()));
}
