#!/usr/bin/env node
/**
 * occulift-sam-adapter — external segmenter process for the occulift-seg/1
 * protocol.
 *
 *   occulift-sam-adapter [--model NAME] [--weights PATH] [--device DEV]
 *                        [--cache-size N] [--stub]
 *   occulift-sam-adapter dump-features --image PATH --out PATH [--channels N]
 *
 * The default mode serves requests on stdin/stdout. dump-features writes an
 * OLFEAT1 feature map for one image (stub features unless a real backend is
 * configured).
 */

import { loadModel } from "./model.js";
import { serve } from "./serve.js";
import { FEATURE_MAP_SIZE, stubFeatures, writeFeatureMap } from "./features.js";

interface Args {
  command: "serve" | "dump-features";
  model: string;
  weights?: string;
  device: string;
  cacheSize: number;
  stub: boolean;
  image?: string;
  out?: string;
  channels: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = {
    command: "serve",
    model: "echo-box",
    device: "cpu",
    cacheSize: 16,
    stub: false,
    channels: 32,
  };
  const rest = [...argv];
  if (rest[0] === "dump-features") {
    args.command = "dump-features";
    rest.shift();
  }
  while (rest.length > 0) {
    const flag = rest.shift()!;
    const need = (): string => {
      const v = rest.shift();
      if (v === undefined) throw new Error(`${flag} needs a value`);
      return v;
    };
    switch (flag) {
      case "--model":
        args.model = need();
        break;
      case "--weights":
        args.weights = need();
        break;
      case "--device":
        args.device = need();
        break;
      case "--cache-size":
        args.cacheSize = Number(need());
        break;
      case "--stub":
        args.stub = true;
        break;
      case "--image":
        args.image = need();
        break;
      case "--out":
        args.out = need();
        break;
      case "--channels":
        args.channels = Number(need());
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  return args;
}

async function main(): Promise<number> {
  let args: Args;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    process.stderr.write(`argument error: ${(err as Error).message}\n`);
    return 2;
  }

  if (args.command === "dump-features") {
    if (!args.image || !args.out) {
      process.stderr.write("dump-features needs --image and --out\n");
      return 2;
    }
    const values = stubFeatures(args.image, args.channels);
    writeFeatureMap(
      args.out,
      FEATURE_MAP_SIZE,
      FEATURE_MAP_SIZE,
      args.channels,
      values,
    );
    return 0;
  }

  let model;
  try {
    model = loadModel(args);
  } catch (err) {
    // model load failure replaces the handshake with a fatal error line
    process.stdout.write(
      JSON.stringify({ fatal: (err as Error).message }) + "\n",
    );
    return 1;
  }
  await serve(model, { cacheSize: args.cacheSize });
  return 0;
}

main().then(
  (code) => process.exit(code),
  (err) => {
    process.stderr.write(`fatal: ${err}\n`);
    process.exit(1);
  },
);
