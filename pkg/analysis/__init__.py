# Blocklist analytics and report emission
