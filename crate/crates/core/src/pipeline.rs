//! End-to-end sounding: install a scenario in the emulator via the replay
//! server, push the probe through one link, and validate what comes out.

use std::sync::Arc;

use crate::engine::{ChannelEmulator, IqChunk};
use crate::replay::{drive_engine_collect, LinkFilter, PlaybackMode, PlaybackSession, ReplayError};
use crate::scenario::{LinkId, Scenario, TapLine};
use crate::sounder::{
    estimate_cir, extract_taps_from_cir, noise_power_for, probe_signal, validate_channel, CirEstimate,
    SounderError, SoundingConfig, Tolerances, ValidationRecord,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Sounder(#[from] SounderError),
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
}

#[derive(Debug, Clone)]
pub struct SoundingOutcome {
    pub cir: CirEstimate,
    pub recovered: TapLine,
}

/// Sounds `link` during millisecond `time_ms` of a scenario replayed at the
/// snapshot cadence. Noise power is set from `cfg.snr_db` against the
/// installed tap power of that link and snapshot.
pub fn sound_link(
    scenario: &Arc<Scenario>,
    link: LinkId,
    time_ms: u32,
    cfg: &SoundingConfig,
) -> Result<SoundingOutcome, PipelineError> {
    let grid = scenario.grid();
    let installed = scenario.tap_line(link, time_ms)?;
    let sps = grid.samples_per_snapshot().ok_or(ReplayError::NonIntegralSnapshot)?;
    let start = time_ms as u64 * sps;

    let mut session = PlaybackSession::new(scenario.clone(), PlaybackMode::Virtual);
    session.set_filter(LinkFilter::all());
    session.seek(time_ms)?;
    let mut emu = ChannelEmulator::new(grid, scenario.num_nodes(), scenario.antennas_per_node(), start)
        .map_err(ReplayError::from)?;
    emu.set_noise(noise_power_for(installed, cfg.snr_db), cfg.seed);

    let a = scenario.antennas_per_node() as usize;
    let tx_port = link.tx_node as usize * a + link.tx_antenna as usize;
    let rx_port = link.rx_node as usize * a + link.rx_antenna as usize;
    let probe = probe_signal(&cfg.sequence, cfg.repetitions, start, grid.sample_rate_hz());
    let inputs: Vec<IqChunk> = (0..emu.ports())
        .map(|p| {
            if p == tx_port {
                probe.clone()
            } else {
                IqChunk::zeros(probe.len(), start, probe.sample_rate_hz)
            }
        })
        .collect();
    let outs = drive_engine_collect(&mut session, &mut emu, &inputs)?;
    let cir = estimate_cir(&cfg.sequence, &outs[rx_port], cfg.repetitions, grid.num_bins as usize)?;
    let recovered = extract_taps_from_cir(&cir, cfg.k, cfg.threshold_db);
    Ok(SoundingOutcome { cir, recovered })
}

/// Sounds `emulated` and validates the recovered taps against `reference`
/// (usually the same scenario).
pub fn validate_link(
    emulated: &Arc<Scenario>,
    reference: &Scenario,
    link: LinkId,
    time_ms: u32,
    cfg: &SoundingConfig,
    tol: &Tolerances,
) -> Result<ValidationRecord, PipelineError> {
    let outcome = sound_link(emulated, link, time_ms, cfg)?;
    let installed = reference.tap_line(link, time_ms)?;
    let result = validate_channel(installed, &outcome.recovered, &reference.grid(), tol);
    Ok(ValidationRecord::new(link, time_ms, result))
}
