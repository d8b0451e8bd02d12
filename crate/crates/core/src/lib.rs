//! Question-driven reward shaping for instruction-following agents.
//!
//! An instruction such as "put the red ball next to the blue box" yields one
//! masked-word question per content word. A question-answering model reads the
//! agent's trajectory, and each question it answers correctly pays a bonus
//! proportional to its confidence. Successful episodes have their bonuses
//! subtracted at the final step, so discounted successful returns are
//! unchanged.
//!
//! * [`gridworld`]: rooms, doors and objects, egocentric observations, tasks.
//! * [`lang`]: vocabulary, instructions, question generation.
//! * [`bot`]: planning demonstrator with action noise.
//! * [`dataset`]: QA corpus generation, splits and storage.
//! * [`qa`]: multimodal transformer QA model and its training loop.
//! * [`shaping`]: bonuses, neutralisation and the choice of λ.
//! * [`rl`]: recurrent actor-critic trained by PPO.

pub mod gridworld;
pub mod lang;
pub mod bot;
pub mod dataset;
pub mod shaping;
pub mod qa;
pub mod rl;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gridworld.md")]
    mod gridworld {}
    #[doc = include_str!("../../../book/src/questions.md")]
    mod questions {}
    #[doc = include_str!("../../../book/src/demonstrations.md")]
    mod demonstrations {}
    #[doc = include_str!("../../../book/src/qa_model.md")]
    mod qa_model {}
    #[doc = include_str!("../../../book/src/shaping.md")]
    mod shaping {}
    #[doc = include_str!("../../../book/src/ppo.md")]
    mod ppo {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
