import { Manifest } from "../src/state.js";

export const manifest: Manifest = {
  schema: "persona/1",
  subjects: [
    { id: "s000", category: "hat", prompt: "a red hat" },
    { id: "s001", category: "beard", prompt: "a grey beard" },
    { id: "s002", category: "hat", prompt: "a straw hat" },
    { id: "s003", category: "beard", prompt: "a dark beard" },
  ],
  parts: ["beard", "clothes", "earrings", "eyebrows", "hair", "hat", "headphones", "mouth", "nose"],
  poses: ["rest", "frame:0", "frame:1"],
  latent_dim: 16,
  latent_rows: 10,
  n_points: 2000,
  default_size: 64,
  max_size: 512,
};
