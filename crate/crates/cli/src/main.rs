#[tokio::main]
async fn main() {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    let code = rrp_cli::run(std::env::args_os(), &mut rrp_cli::Io { out: &mut out, err: &mut err }).await;
    std::process::exit(code);
}
