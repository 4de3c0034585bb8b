# Blockprobe Package
