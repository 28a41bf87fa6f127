//! Text and CSV renderings for `authcli`.

use ccpauth_core::analysis::{AttackReport, AttackerKind};
use ccpauth_core::SpaceParams;
use num_bigint::BigUint;

/// `d.ddd×10^k`, rounded half up on the fourth significant digit.
pub fn scientific(n: &BigUint) -> String {
    let digits = n.to_str_radix(10);
    let mut exp = digits.len() - 1;
    let mut lead: Vec<u8> = digits.bytes().take(4).map(|b| b - b'0').collect();
    lead.resize(4, 0);
    if digits.len() > 4 && digits.as_bytes()[4] >= b'5' {
        let mut i = 3;
        loop {
            lead[i] += 1;
            if lead[i] < 10 {
                break;
            }
            lead[i] = 0;
            if i == 0 {
                lead.insert(0, 1);
                lead.truncate(4);
                exp += 1;
                break;
            }
            i -= 1;
        }
    }
    format!("{}.{}{}{}×10^{exp}", lead[0], lead[1], lead[2], lead[3])
}

pub fn render_space(p: &SpaceParams, space: &BigUint, csv: bool) -> String {
    if csv {
        return format!(
            "w,h,t,m,n,c,space,scientific\n{},{},{},{},{},{},{},{}\n",
            p.w,
            p.h,
            p.t,
            p.m,
            p.n,
            p.c,
            space,
            scientific(space)
        );
    }
    format!(
        "{space} ≈ {}\n(((floor(w*h/t^2))*m)^n)^c with w={} h={} t={} m={} n={} c={}\n",
        scientific(space),
        p.w,
        p.h,
        p.t,
        p.m,
        p.n,
        p.c
    )
}

const ATTACK_CSV_HEADER: &str = "model,trials,seed,successes,rate,reference,reference_value,sigma,z,within_3_sigma";

pub fn render_attack(r: &AttackReport, csv: bool) -> String {
    let within = r.within_sigmas(3.0);
    if csv {
        return format!(
            "{ATTACK_CSV_HEADER}\n{},{},{},{},{:e},{},{:e},{:e},{:.4},{}\n",
            r.kind,
            r.trials,
            r.seed,
            r.successes,
            r.rate,
            r.reference,
            r.reference.value(),
            r.sigma,
            r.z_score(),
            within
        );
    }
    let reference_kind = match r.kind {
        AttackerKind::SessionObserver => "exhaustive enumeration",
        _ => "closed form",
    };
    format!(
        "model: {} — {}\n\
         interpretation: attacker model formalizing the resistance claims; lockout disabled, each trial is one full login through the real verifier\n\
         trials: {}  seed: {}\n\
         successes: {}\n\
         empirical rate: {:.4e}\n\
         reference ({reference_kind}): {} = {:.4e}\n\
         sigma: {:.3e}  z: {:+.2}  within 3 sigma: {}\n",
        r.kind,
        r.kind.describe(),
        r.trials,
        r.seed,
        r.successes,
        r.rate,
        r.reference,
        r.reference.value(),
        r.sigma,
        r.z_score(),
        if within { "yes" } else { "no" }
    )
}
