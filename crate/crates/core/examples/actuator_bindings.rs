//! Expressions over the output vector driving an LED, a relay and a
//! datagram message, with a homeostat damping an over-active binding.
//!
//! ```bash
//! cargo run -p phytosense --example actuator_bindings
//! ```

use std::collections::HashSet;
use std::error::Error;
use std::net::UdpSocket;
use std::time::Duration;

use indexmap::IndexMap;

use phytosense::actuation::{
    build_bindings, evaluate_bindings, homeostat_update, ActuatorKind, BindingConfig, Dispatcher, HomeostatConfig,
    Transport,
};
use phytosense::detectors::{OutputValue, OutputVector};
use phytosense::sim::StimulusEvent;

fn binding(id: &str, when: &str, actuator: &str) -> BindingConfig {
    BindingConfig {
        id: id.into(),
        when: when.into(),
        actuator: actuator.into(),
        color: None,
        on: None,
        payload: None,
        intensity: None,
        homeostat: None,
    }
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let listener = UdpSocket::bind("127.0.0.1:0")?;
    listener.set_read_timeout(Some(Duration::from_secs(2)))?;

    let mut actuators = IndexMap::new();
    actuators.insert("led".to_string(), ActuatorKind::RgbLed);
    actuators.insert("pump".to_string(), ActuatorKind::Relay);
    actuators.insert(
        "net".to_string(),
        ActuatorKind::MessageToIp {
            address: listener.local_addr()?.to_string(),
            transport: Transport::Datagram,
            timeout_ms: 500,
        },
    );

    let configs = vec![
        BindingConfig { color: Some("yellow".into()), ..binding("warn", "HEALTH >= 1 AND NOT HEALTH >= 2", "led") },
        BindingConfig { on: Some(true), ..binding("water", "DRY AND BERNOULLI(0.5)", "pump") },
        BindingConfig {
            payload: Some("noisy".into()),
            homeostat: Some(HomeostatConfig { target_rate: 60.0, time_constant_s: 600.0 }),
            ..binding("notify", "NOISE > 0.5", "net")
        },
    ];
    let ids: HashSet<&str> = ["HEALTH", "DRY", "NOISE"].into_iter().collect();
    let mut bindings = build_bindings(&configs, &ids, &actuators)?;
    for b in &bindings {
        println!("{}: {}", b.id, b.expression);
    }

    let mut dispatcher = Dispatcher::new(actuators);
    let mut stimuli: Vec<StimulusEvent> = Vec::new();
    let mut fired_notify = 0;
    for cycle in 0..120u64 {
        let v = OutputVector {
            cycle_id: cycle,
            timestamp_ms: 1_717_200_000_000 + cycle as i64 * 1000,
            entries: vec![
                ("HEALTH".into(), OutputValue::Numeric(1.0)),
                ("DRY".into(), OutputValue::True),
                ("NOISE".into(), OutputValue::Numeric(0.6)),
            ],
        };
        let cmds = evaluate_bindings(&v, &bindings, 7);
        for b in &mut bindings {
            if let Some(h) = b.homeostat {
                b.homeostat = Some(homeostat_update(h, cmds.iter().any(|c| c.binding_id == b.id), 1.0));
            }
        }
        for c in &cmds {
            dispatcher.dispatch(c, &mut stimuli)?;
            fired_notify += (c.binding_id == "notify") as u32;
        }
    }
    let h = bindings[2].homeostat.unwrap();
    println!("notify fired {fired_notify} times; threshold multiplier now {:.3}", h.threshold_adjust);
    println!("device state: {:?}", dispatcher.state());

    let mut buf = [0u8; 256];
    let n = listener.recv(&mut buf)?;
    print!("first datagram: {}", String::from_utf8_lossy(&buf[..n]));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
