use anyhow::Context;
use latentpaint_core::pipeline::ModelBundle;
use latentpaint_service::{router, AppState, ServiceConfig};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = ServiceConfig::from_env()?;
    let bundle = ModelBundle::load(&config.paths).with_context(|| format!("loading {}", config.paths.generator.display()))?;
    log::info!("loaded checkpoint {}", bundle.checkpoint_id());
    let port = config.port;
    let app = router(AppState::new(bundle, config));
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
